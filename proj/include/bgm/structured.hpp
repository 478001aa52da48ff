#pragma once

// Structured generative networks: a learnable mechanism (the "bgm") plus the
// auxiliary conditional flows that make each causal structure's required
// independence hold by construction, trained jointly by exact likelihood.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bgm/dataset.hpp"
#include "bgm/flow.hpp"
#include "bgm/train.hpp"

namespace bgm {

enum class StructureKind { Markovian, IV, BC, IVBC };

std::string to_string(StructureKind k);
StructureKind parse_structure(const std::string& s);

struct StructureSpec {
  StructureKind kind = StructureKind::Markovian;
  /// Orientation within the BC equivalence class: 'a' (Z -> U, Z -> X),
  /// 'b' (X -> Z -> U) or 'c' (U -> Z -> X). Ignored for other kinds.
  char variant = 'a';
  /// Markovian only: condition the mechanism on (x, z) instead of x.
  bool condition_on_z = false;

  void validate() const;
};

struct StructureDims {
  std::size_t x_dim = 1;
  std::size_t z_dim = 0;
  std::size_t v_dim = 1;
  std::vector<double> x_grid;    // finite X support (scalar X), empty if continuous
  std::vector<double> i_levels;  // instrument values (IV, IVBC)

  static StructureDims of(const Dataset& ds);
};

class StructuredNetwork : public Objective {
 public:
  StructuredNetwork() = default;
  StructuredNetwork(const StructureSpec& spec, const StructureDims& dims, const FlowConfig& bgm_cfg,
                    const FlowConfig& aux_cfg, std::uint64_t seed);

  const StructureSpec& spec() const { return spec_; }
  const StructureDims& dims() const { return dims_; }
  std::size_t flow_count() const;

  const ConditionalBijection& bgm() const { return bgm_; }
  ConditionalBijection& bgm() { return bgm_; }
  const std::optional<ConditionalBijection>& aux_u() const { return aux_u_; }
  const std::optional<ConditionalBijection>& aux_x() const { return aux_x_; }
  const std::optional<ConditionalBijection>& aux_z() const { return aux_z_; }
  ConditionalBijection extract_bgm() const { return bgm_; }

  /// Condition matrix of the mechanism for dataset rows: x, or [x | z].
  Matrix bgm_condition(const Dataset& ds) const;

  /// Packs the observed columns this structure trains on into one matrix.
  /// Throws SchemaError if the dataset lacks a required column group.
  Matrix training_matrix(const Dataset& ds) const;
  /// Initial input standardization and output ranges from data.
  void calibrate(const Dataset& ds);

  // Objective
  std::vector<Param*> parameters() override;
  Var nll(GradTape& tape, const Matrix& batch) const override;
  nlohmann::json snapshot() const override { return to_json(); }
  void restore(const nlohmann::json& j) override { *this = from_json(j); }

  /// Per-row negative log-likelihood of the observed variables.
  Vec row_nll(const Dataset& ds) const;
  double joint_nll(const Dataset& ds) const;

  /// Draws n records from the network. Root variables (I and/or Z, and X for
  /// BC-type structures) are taken from `roots` rows cycled in order; all
  /// noise is standard normal. `u_hidden` holds the network's latent.
  Dataset sample(const Dataset& roots, std::size_t n, std::uint64_t seed) const;

  nlohmann::json to_json() const;
  static StructuredNetwork from_json(const nlohmann::json& j);

 private:
  struct Layout {
    std::size_t x = 0, z = 0, i = 0, xi = 0, v = 0, width = 0;
  };
  void make_layout();
  std::size_t grid_index(double x) const;
  Matrix one_hot(const Dataset& ds) const;
  Var row_terms(GradTape& tape, const Matrix& batch) const;  // n x 1 log-likelihood

  StructureSpec spec_;
  StructureDims dims_;
  ConditionalBijection bgm_;
  std::optional<ConditionalBijection> aux_u_;  // U | Z
  std::optional<ConditionalBijection> aux_x_;  // relaxed X | (I, U)
  std::optional<ConditionalBijection> aux_z_;  // Z | U (BC variant c)
  Layout layout_;
};

/// Row-wise log(Phi(hi) - Phi(lo)); rows with open_lo / open_hi set use
/// -inf / +inf for that end.
Var log_normal_interval(Var lo, Var hi, std::vector<bool> open_lo, std::vector<bool> open_hi);

}  // namespace bgm
