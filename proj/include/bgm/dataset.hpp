#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "bgm/matrix.hpp"

namespace bgm {

/// Column groups of a causal dataset. Empty groups have zero columns.
/// `u_hidden` exists only for synthetic data and never feeds training.
struct Dataset {
  std::string scm;
  std::string structure;  // generator variant, e.g. "bc" for ABR-like data
  std::uint64_t seed = 0;
  Matrix i, z, x, v, u_hidden;
  /// Finite domain of X when it is discrete (one value per row of the grid,
  /// scalar X only); empty for continuous X.
  std::vector<double> x_grid;
  /// Distinct instrument values when `i` is present.
  std::vector<double> i_levels;

  std::size_t rows() const { return v.rows(); }
  bool has_i() const { return i.cols() > 0; }
  bool has_z() const { return z.cols() > 0; }
  bool has_u() const { return u_hidden.cols() > 0; }

  /// Throws SchemaError if group row counts disagree.
  void validate() const;
  std::vector<std::string> column_names() const;
  Dataset select(std::span<const std::size_t> rows) const;
  /// First `count` rows and the remainder.
  std::pair<Dataset, Dataset> split(std::size_t count) const;

  nlohmann::json sidecar() const;
};

/// Names of `d` columns for a group: "v" for d == 1, else "v0", "v1", ...
std::vector<std::string> group_names(const std::string& base, std::size_t d,
                                     const std::string& suffix = "");

/// Writes `path` (CSV) and `path` with its extension replaced by .json.
void write_dataset(const Dataset& ds, const std::string& csv_path);
Dataset read_dataset(const std::string& csv_path);
std::string sidecar_path(const std::string& csv_path);

/// Shortest decimal form that parses back to the same double.
std::string format_double(double x);

}  // namespace bgm
