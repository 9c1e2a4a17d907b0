#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "txd/factor.hpp"

namespace txd {

enum class Shape { CompletelyRandomised, RandomisedBlock, Multicentre };

std::string_view shape_letter(Shape shape) noexcept;  // "a", "b", "c"
Shape parse_shape(std::string_view text);             // accepts a|b|c

struct DesignSpec {
  Shape shape = Shape::CompletelyRandomised;
  int nI = 2;
  int nT = 16;  // therapists per centre
  int nB = 1;
  int nC = 1;
  int nR = 1;
  std::uint64_t seed = 0;

  /// Throws ConfigError for invalid or overflowing counts.
  void validate() const;
  std::size_t n_units() const;
  int n_therapists() const noexcept { return nT * nC; }
  int n_blocks() const noexcept { return nB * nC; }
  std::size_t block_size() const noexcept { return static_cast<std::size_t>(nI) * nT * nR; }

  static DesignSpec example_a();  // Figure-2a counts: 2 x 16, 10 replicates
  static DesignSpec example_b();  // 2 x 16, 5 batches, 2 replicates
  static DesignSpec example_c();  // 2 x 8 x 6 centres, 5 batches, 2 replicates
};

/// 0 denotes the proposed joint randomisation; 1..5 are the comparison
/// methods of the simulation study (4 coincides with 0).
using Method = int;

struct Allocation {
  std::int32_t patient = 0;  // recruitment order, 0-based
  std::int32_t centre = 0;
  std::int32_t batch = 0;
  std::int32_t therapist = 0;  // global label 0 .. nT*nC-1
  std::int32_t intervention = 0;
};

struct AllocationTable {
  DesignSpec spec;
  Method method = 0;
  std::vector<Allocation> rows;

  std::size_t size() const noexcept { return rows.size(); }

  /// Level vector of one column: "I", "T", "B", "C" (or their long names).
  std::vector<std::int32_t> column(std::string_view name) const;
  Factor factor(std::string_view name) const;

  /// `patient,centre,batch,therapist,intervention`, 1-based, LF endings.
  std::string to_csv() const;
};

/// Covariate inputs for the non-random (matched) assignment methods. x3 and
/// m3 are indexed by intervention because the matching for method 1 sees
/// the randomised intervention.
struct MatchingInputs {
  std::vector<double> x2;                // per patient
  std::vector<std::vector<double>> x3;   // [patient][intervention]
  std::vector<double> m2;                // per therapist (global label)
  std::vector<std::vector<double>> m3;   // [therapist][intervention]
  bool use_x2 = true;
  bool use_x3 = false;

  void validate(const DesignSpec& spec) const;
};

/// Blocks in (centre, batch) order; each block is a contiguous row range.
AllocationTable systematic_design(const DesignSpec& spec);

/// Independent uniform permutation of each block of the systematic design.
AllocationTable randomise(const DesignSpec& spec);

/// Assignment by one of the five comparison methods. Methods 1-3 require
/// matching inputs; methods 4 and 5 ignore them.
AllocationTable assign_by_method(const DesignSpec& spec, Method method, const MatchingInputs* inputs);

/// Tally of (intervention, therapist) cells, optionally restricted to one block.
std::vector<std::int32_t> cell_counts(const AllocationTable& table, int centre = -1, int batch = -1);

}  // namespace txd
