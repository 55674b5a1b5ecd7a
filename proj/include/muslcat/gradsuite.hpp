#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "muslcat/gradcheck.hpp"

namespace muslcat {

struct SuiteEntry {
  std::string module;
  std::string shape;
  GradCheckReport report;
};

// Layers covered by the suite, each checked on three input shapes.
std::vector<std::string> gradcheck_module_names();

// Central differences at eps 1e-5, tolerance 1e-4, every entry of every
// parameter and input. An empty name runs everything; an unknown one throws
// ValidationError.
std::vector<SuiteEntry> run_gradcheck_suite(const std::string& module = "", std::uint64_t seed = 7);

}  // namespace muslcat
