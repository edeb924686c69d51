#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace trajgeo {

enum class ModelKind { Teacher, Student };

struct BlockError {
  std::string name;
  double worst = 0.0;  // max relative error over the block's entries
};

struct GradientCheckReport {
  ModelKind kind = ModelKind::Teacher;
  bool passed = false;
  bool finite = true;
  double tolerance = 1e-4;
  double worst = 0.0;
  std::vector<BlockError> blocks;
};

/// Compares analytic gradients with central differences on a tiny seeded
/// model: teacher 8 -> 6 -> 5 -> 1 on a random batch with BCE, student
/// (two bidirectional layers of width 3, both heads) on a 5-step trace with
/// the full distillation loss. Relative error is |a - n| / max(|a|, |n|, 1e-6).
GradientCheckReport gradient_check(ModelKind kind, double tolerance = 1e-4, std::uint64_t seed = 0,
                                   bool zero_input = false);

std::string format_report(const GradientCheckReport& report);

}  // namespace trajgeo
