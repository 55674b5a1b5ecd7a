#pragma once

#include <stdexcept>
#include <string>

namespace muslcat {

// Bad user input: config, manifest, CLI arguments, files that cannot be used.
// The CLI maps this to exit code 1; everything else is a runtime failure.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace muslcat
