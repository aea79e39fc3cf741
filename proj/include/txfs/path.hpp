#pragma once

#include <string>
#include <utility>
#include <vector>

namespace txfs {

// Paths are absolute, '/'-separated, with no empty, "." or ".." components.
bool is_valid_path(const std::string& path);

// Validates and canonicalizes (strips a trailing slash). Throws
// FsError(InvalidPath) on bad input.
std::string normalize_path(const std::string& path);

// Components of a normalized path; "/" yields an empty list.
std::vector<std::string> split_path(const std::string& path);

// ("/a/b") -> ("/a", "b"); ("/x") -> ("/", "x"). Path must not be "/".
std::pair<std::string, std::string> split_parent(const std::string& path);

}  // namespace txfs
