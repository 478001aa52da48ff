#include "bgm/dataset.hpp"

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bgm/errors.hpp"

namespace bgm {

using nlohmann::json;

namespace {

const char* const kGroups[] = {"i", "z", "x", "v", "u_hidden"};

Matrix* group(Dataset& ds, std::size_t g) {
  Matrix* all[] = {&ds.i, &ds.z, &ds.x, &ds.v, &ds.u_hidden};
  return all[g];
}
const Matrix* group(const Dataset& ds, std::size_t g) {
  const Matrix* all[] = {&ds.i, &ds.z, &ds.x, &ds.v, &ds.u_hidden};
  return all[g];
}

}  // namespace

std::vector<std::string> group_names(const std::string& base, std::size_t d,
                                     const std::string& suffix) {
  std::vector<std::string> out;
  if (d == 1) {
    out.push_back(base + suffix);
  } else {
    for (std::size_t c = 0; c < d; ++c) out.push_back(base + std::to_string(c) + suffix);
  }
  return out;
}

void Dataset::validate() const {
  const std::size_t n = rows();
  for (std::size_t g = 0; g < 5; ++g) {
    const Matrix* m = group(*this, g);
    if (m->cols() > 0 && m->rows() != n) {
      throw SchemaError(std::string("dataset: column group '") + kGroups[g] + "' has " +
                        std::to_string(m->rows()) + " rows, expected " + std::to_string(n));
    }
  }
  if (v.cols() == 0) throw SchemaError("dataset: no v columns");
  if (x.cols() == 0) throw SchemaError("dataset: no x columns");
  if (has_u() && u_hidden.cols() != v.cols()) {
    throw SchemaError("dataset: u_hidden and v must have the same width");
  }
}

std::vector<std::string> Dataset::column_names() const {
  std::vector<std::string> names;
  for (std::size_t g = 0; g < 4; ++g) {
    for (auto& s : group_names(kGroups[g], group(*this, g)->cols())) names.push_back(s);
  }
  for (auto& s : group_names("u", u_hidden.cols(), "_hidden")) names.push_back(s);
  return names;
}

Dataset Dataset::select(std::span<const std::size_t> idx) const {
  Dataset out = *this;
  for (std::size_t g = 0; g < 5; ++g) {
    const Matrix* src = group(*this, g);
    Matrix* dst = group(out, g);
    *dst = src->cols() > 0 ? select_rows(*src, idx) : Matrix(idx.size(), 0);
  }
  return out;
}

std::pair<Dataset, Dataset> Dataset::split(std::size_t count) const {
  if (count > rows()) throw ValidationError("dataset: split larger than dataset");
  std::vector<std::size_t> a(count), b(rows() - count);
  for (std::size_t r = 0; r < count; ++r) a[r] = r;
  for (std::size_t r = count; r < rows(); ++r) b[r - count] = r;
  return {select(a), select(b)};
}

json Dataset::sidecar() const {
  json groups = json::object();
  for (std::size_t g = 0; g < 5; ++g) groups[kGroups[g]] = group(*this, g)->cols();
  return {{"format", "bgm-dataset"}, {"version", 1},         {"scm", scm},
          {"structure", structure},  {"seed", seed},         {"n", rows()},
          {"columns", column_names()}, {"groups", groups},   {"x_grid", x_grid},
          {"i_levels", i_levels}};
}

std::string format_double(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

std::string sidecar_path(const std::string& csv_path) {
  return std::filesystem::path(csv_path).replace_extension(".json").string();
}

void write_dataset(const Dataset& ds, const std::string& csv_path) {
  ds.validate();
  std::ofstream out(csv_path);
  if (!out) throw ValidationError("cannot write " + csv_path);
  const auto names = ds.column_names();
  for (std::size_t c = 0; c < names.size(); ++c) out << (c ? "," : "") << names[c];
  out << '\n';
  std::string line;
  for (std::size_t r = 0; r < ds.rows(); ++r) {
    line.clear();
    bool first = true;
    for (std::size_t g = 0; g < 5; ++g) {
      const Matrix* m = group(ds, g);
      for (std::size_t c = 0; c < m->cols(); ++c) {
        if (!first) line += ',';
        first = false;
        line += format_double((*m)(r, c));
      }
    }
    out << line << '\n';
  }
  std::ofstream side(sidecar_path(csv_path));
  if (!side) throw ValidationError("cannot write " + sidecar_path(csv_path));
  side << ds.sidecar().dump(2) << '\n';
  if (!out || !side) throw ValidationError("write failed for " + csv_path);
}

Dataset read_dataset(const std::string& csv_path) {
  std::ifstream side(sidecar_path(csv_path));
  if (!side) throw ValidationError("missing dataset sidecar " + sidecar_path(csv_path));
  json meta;
  try {
    meta = json::parse(side);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("dataset sidecar: ") + e.what());
  }
  if (meta.value("format", "") != "bgm-dataset") throw SchemaError("dataset sidecar: wrong format tag");

  Dataset ds;
  ds.scm = meta.value("scm", "");
  ds.structure = meta.value("structure", "");
  ds.seed = meta.value("seed", std::uint64_t{0});
  ds.x_grid = meta.value("x_grid", std::vector<double>{});
  ds.i_levels = meta.value("i_levels", std::vector<double>{});
  std::size_t widths[5];
  std::size_t total = 0;
  for (std::size_t g = 0; g < 5; ++g) {
    widths[g] = meta.at("groups").value(kGroups[g], std::size_t{0});
    total += widths[g];
  }

  std::ifstream in(csv_path);
  if (!in) throw ValidationError("cannot read " + csv_path);
  std::string header;
  std::getline(in, header);
  std::vector<std::vector<double>> cols(total);
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const char* p = line.data();
    const char* end = p + line.size();
    for (std::size_t c = 0; c < total; ++c) {
      double value = 0.0;
      auto res = std::from_chars(p, end, value);
      if (res.ec != std::errc()) {
        throw SchemaError(csv_path + ":" + std::to_string(lineno) + ": bad number in column " +
                          std::to_string(c + 1));
      }
      cols[c].push_back(value);
      p = res.ptr;
      if (c + 1 < total) {
        if (p == end || *p != ',') {
          throw SchemaError(csv_path + ":" + std::to_string(lineno) + ": expected " +
                            std::to_string(total) + " columns");
        }
        ++p;
      }
    }
    if (p != end && *p != '\r') {
      throw SchemaError(csv_path + ":" + std::to_string(lineno) + ": too many columns");
    }
  }
  const std::size_t n = total ? cols[0].size() : 0;
  std::size_t c = 0;
  for (std::size_t g = 0; g < 5; ++g) {
    Matrix m(n, widths[g]);
    for (std::size_t k = 0; k < widths[g]; ++k, ++c) {
      for (std::size_t r = 0; r < n; ++r) m(r, k) = cols[c][r];
    }
    *group(ds, g) = std::move(m);
  }
  if (meta.contains("n") && meta["n"].get<std::size_t>() != n) {
    throw SchemaError("dataset: sidecar row count does not match CSV");
  }
  std::ostringstream expect;
  const auto names = ds.column_names();
  for (std::size_t k = 0; k < names.size(); ++k) expect << (k ? "," : "") << names[k];
  if (!header.empty() && header.back() == '\r') header.pop_back();
  if (header != expect.str()) throw SchemaError("dataset: CSV header does not match sidecar");
  ds.validate();
  return ds;
}

}  // namespace bgm
