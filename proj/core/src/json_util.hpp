// Strict field access over nlohmann::json for the line-delimited readers.
#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include "json.hpp"
#include "slmaudit/error.hpp"

namespace slmaudit::detail {

using Json = nlohmann::json;
using OrderedJson = nlohmann::ordered_json;

// Throws DataError if `obj` is not an object, lacks a required key, or carries
// a key outside required ∪ optional.
void expect_fields(const Json& obj, std::initializer_list<std::string_view> required,
                   std::initializer_list<std::string_view> optional = {});

const std::string& get_string(const Json& obj, std::string_view key);
char get_letter(const Json& obj, std::string_view key);
char to_letter(const Json& value, std::string_view what);
double get_number(const Json& obj, std::string_view key);

}  // namespace slmaudit::detail
