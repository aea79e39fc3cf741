#include "txfs/path.hpp"

#include "txfs/types.hpp"

namespace txfs {

bool is_valid_path(const std::string& path) {
  if (path.empty() || path[0] != '/') return false;
  if (path == "/") return true;
  std::string rest = path;
  if (rest.back() == '/') rest.pop_back();
  size_t pos = 1;
  while (pos <= rest.size()) {
    size_t next = rest.find('/', pos);
    if (next == std::string::npos) next = rest.size();
    const std::string comp = rest.substr(pos, next - pos);
    if (comp.empty() || comp == "." || comp == "..") return false;
    pos = next + 1;
  }
  return true;
}

std::string normalize_path(const std::string& path) {
  if (!is_valid_path(path)) {
    throw FsError(ErrorCode::InvalidPath, "invalid path: " + path);
  }
  if (path.size() > 1 && path.back() == '/') {
    return path.substr(0, path.size() - 1);
  }
  return path;
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> out;
  if (path == "/") return out;
  size_t pos = 1;
  while (pos <= path.size()) {
    size_t next = path.find('/', pos);
    if (next == std::string::npos) next = path.size();
    out.push_back(path.substr(pos, next - pos));
    pos = next + 1;
  }
  return out;
}

std::pair<std::string, std::string> split_parent(const std::string& path) {
  const size_t slash = path.find_last_of('/');
  std::string parent = slash == 0 ? "/" : path.substr(0, slash);
  return {parent, path.substr(slash + 1)};
}

}  // namespace txfs
