#pragma once

// Configuration and result files: YAML model blocks, CSV tables with a
// digest manifest line, and SHA-256 digests of configuration text.

#include <fmt/format.h>
#include <openssl/evp.h>
#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "bayesgrid/grid.hpp"
#include "bayesgrid/lgd.hpp"
#include "bayesgrid/transition.hpp"

namespace bayesgrid::io {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string sha256_hex(const std::string& text) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  const bool ok = ctx != nullptr && EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, text.data(), text.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, digest, &length) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw IoError("SHA-256 digest failed");
  std::string hex;
  for (unsigned int i = 0; i < length; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Shortest text that parses back to the same double.
inline std::string number(double v) { return fmt::format("{}", v); }

// ---------------------------------------------------------------------------
// YAML

inline Matrix parse_matrix(const YAML::Node& node, const std::string& name) {
  if (!node) throw IoError("missing matrix '" + name + "'");
  if (node.IsMap() && node["diag"]) {
    const auto diag = node["diag"].as<std::vector<double>>();
    Matrix m = Matrix::Zero(diag.size(), diag.size());
    for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
    return m;
  }
  if (!node.IsSequence() || node.size() == 0) throw IoError("matrix '" + name + "' must be a list of rows");
  const auto rows = node.as<std::vector<std::vector<double>>>();
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.front().size()) throw IoError("matrix '" + name + "' has ragged rows");
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
  }
  return m;
}

inline Vector parse_vector(const YAML::Node& node, const std::string& name) {
  if (!node || !node.IsSequence()) throw IoError("vector '" + name + "' must be a list");
  const auto v = node.as<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

/// Model block with keys ratings, A, Q, K, G and optional a0, P0 (matrix or
/// "stationary", the default).
inline TransitionModelParams parse_transition_model(const YAML::Node& node, const std::string& name) {
  if (!node || !node.IsMap()) throw IoError("model block '" + name + "' is missing");
  try {
    const int ratings = node["ratings"].as<int>();
    const Matrix a = parse_matrix(node["A"], name + ".A");
    const Matrix q = parse_matrix(node["Q"], name + ".Q");
    const Matrix k = parse_matrix(node["K"], name + ".K");
    const Matrix g = parse_matrix(node["G"], name + ".G");
    const Vector a0 = node["a0"] ? parse_vector(node["a0"], name + ".a0") : Vector::Zero(a.rows());
    Matrix p0;
    if (!node["P0"] || (node["P0"].IsScalar() && node["P0"].as<std::string>() == "stationary"))
      p0 = stationary_covariance(a, q);
    else
      p0 = parse_matrix(node["P0"], name + ".P0");
    return {ratings, StateSpaceSpec(a, q, a0, p0), k, g};
  } catch (const YAML::Exception& e) {
    throw IoError("model block '" + name + "': " + e.what());
  }
}

inline std::string matrix_flow(const Matrix& m) {
  std::string out = "[";
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    out += i ? ", [" : "[";
    for (Eigen::Index j = 0; j < m.cols(); ++j) out += (j ? ", " : "") + number(m(i, j));
    out += "]";
  }
  return out + "]";
}

/// Inverse of parse_transition_model, exact to the last bit.
inline std::string format_transition_model(const TransitionModelParams& p) {
  const auto& s = p.state_space();
  std::string a0 = "[";
  for (Eigen::Index i = 0; i < s.initial_mean().size(); ++i) a0 += (i ? ", " : "") + number(s.initial_mean()(i));
  a0 += "]";
  return fmt::format("ratings: {}\nA: {}\nQ: {}\nK: {}\nG: {}\na0: {}\nP0: {}\n", p.num_ratings(),
                     matrix_flow(s.transition()), matrix_flow(s.process_noise()), matrix_flow(p.loadings()),
                     matrix_flow(p.levels()), a0, matrix_flow(s.initial_cov()));
}

inline CollateralParams parse_collateral(const YAML::Node& node) {
  CollateralParams p;
  if (!node) return p;
  p.drift = node["drift"].as<double>(p.drift);
  p.ar_coeff = node["ar_coeff"].as<double>(p.ar_coeff);
  p.vol = node["vol"].as<double>(p.vol);
  p.initial_log_return = node["initial_log_return"].as<double>(p.initial_log_return);
  p.validate();
  return p;
}

// ---------------------------------------------------------------------------
// CSV

/// Writes "# key=value ..." then the header, then rows. Fields are joined
/// verbatim; numbers should be pre-formatted with number().
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::string& manifest, const std::vector<std::string>& header)
      : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw IoError("cannot write " + path.string());
    out_ << "# " << manifest << '\n';
    row(header);
  }

  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ',';
      out_ << fields[i];
    }
    out_ << '\n';
  }

  void close() {
    out_.close();
    if (!out_) throw IoError("failed writing " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

struct CsvTable {
  std::string manifest;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw IoError("CSV column '" + name + "' not found");
  }
};

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  CsvTable table;
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(s);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!s.empty() && s.back() == ',') out.emplace_back();
    return out;
  };
  bool have_header = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (table.manifest.empty()) table.manifest = line.substr(line.find_first_not_of("# "));
      continue;
    }
    if (!have_header) {
      table.header = split(line);
      have_header = true;
    } else {
      table.rows.push_back(split(line));
      if (table.rows.back().size() != table.header.size())
        throw IoError(path.string() + ": row width differs from the header");
    }
  }
  if (!have_header) throw IoError(path.string() + ": missing header");
  return table;
}

inline double to_double(const std::string& s) {
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw IoError("not a number: '" + s + "'");
  return v;
}

inline long long to_int(const std::string& s) {
  std::size_t used = 0;
  const long long v = std::stoll(s, &used);
  if (used != s.size()) throw IoError("not an integer: '" + s + "'");
  return v;
}

// ---------------------------------------------------------------------------
// Domain tables. Ratings are 1-based in files.

inline void write_migrations(const std::filesystem::path& path, const std::string& manifest,
                             const MigrationCounts& counts) {
  CsvWriter csv(path, manifest, {"period", "from_rating", "to_rating", "count"});
  for (int k = 0; k < counts.num_periods(); ++k) {
    const Matrix& m = counts.periods[k];
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        csv.row({std::to_string(k + 1), std::to_string(i + 1), std::to_string(j + 1),
                 fmt::format("{:.0f}", m(i, j))});
  }
  csv.close();
}

inline MigrationCounts read_migrations(const std::filesystem::path& path, int num_ratings) {
  const CsvTable t = read_csv(path);
  const auto cp = t.column("period"), cf = t.column("from_rating"), ct = t.column("to_rating"),
             cc = t.column("count");
  MigrationCounts counts;
  for (const auto& row : t.rows) {
    const auto k = to_int(row[cp]);
    const auto i = to_int(row[cf]) - 1, j = to_int(row[ct]) - 1;
    if (k < 1 || i < 0 || j < 0 || i >= num_ratings || j >= num_ratings) throw IoError("migration index out of range");
    while (counts.num_periods() < k) counts.periods.push_back(Matrix::Zero(num_ratings, num_ratings));
    counts.periods[k - 1](i, j) = to_double(row[cc]);
  }
  return counts;
}

inline void write_grid(const std::filesystem::path& points_path, const std::filesystem::path& targets_path,
                       const std::string& manifest, const ValuationGrid& grid) {
  std::vector<std::string> header{"rating"};
  for (int c = 0; c < grid.low_dim; ++c) header.push_back(fmt::format("coord_{}", c + 1));
  CsvWriter points(points_path, manifest, header);
  CsvWriter targets(targets_path, manifest, {"rating", "point_id", "k", "epd"});
  for (const auto& g : grid.ratings) {
    for (Eigen::Index p = 0; p < g.coords.rows(); ++p) {
      std::vector<std::string> row{std::to_string(g.rating + 1)};
      for (int c = 0; c < grid.low_dim; ++c) row.push_back(number(g.coords(p, c)));
      points.row(row);
      for (int k = 0; k < grid.maturity; ++k)
        targets.row({std::to_string(g.rating + 1), std::to_string(p), std::to_string(k + 1), number(g.curves(p, k))});
    }
  }
  points.close();
  targets.close();
}

/// Points are numbered in file order within each rating.
inline ValuationGrid read_grid(const std::filesystem::path& points_path, const std::filesystem::path& targets_path) {
  const CsvTable pts = read_csv(points_path);
  const CsvTable tgt = read_csv(targets_path);
  ValuationGrid grid;
  grid.low_dim = static_cast<int>(pts.header.size()) - 1;
  if (grid.low_dim < 1) throw IoError("grid points file has no coordinates");
  std::map<int, std::vector<std::vector<double>>> coords;
  for (const auto& row : pts.rows) {
    std::vector<double> c;
    for (int i = 1; i <= grid.low_dim; ++i) c.push_back(to_double(row[i]));
    coords[static_cast<int>(to_int(row[0])) - 1].push_back(std::move(c));
  }
  const auto cr = tgt.column("rating"), cp = tgt.column("point_id"), ck = tgt.column("k"), ce = tgt.column("epd");
  for (const auto& row : tgt.rows) grid.maturity = std::max<int>(grid.maturity, static_cast<int>(to_int(row[ck])));
  for (const auto& [rating, list] : coords) {
    RatingGrid g{rating, Matrix(list.size(), grid.low_dim), Matrix::Constant(list.size(), grid.maturity, NAN)};
    for (std::size_t p = 0; p < list.size(); ++p)
      for (int c = 0; c < grid.low_dim; ++c) g.coords(p, c) = list[p][c];
    grid.ratings.push_back(std::move(g));
  }
  for (const auto& row : tgt.rows) {
    const int rating = static_cast<int>(to_int(row[cr])) - 1;
    const auto p = to_int(row[cp]);
    const auto k = to_int(row[ck]);
    auto it = std::find_if(grid.ratings.begin(), grid.ratings.end(), [&](const auto& g) { return g.rating == rating; });
    if (it == grid.ratings.end() || p < 0 || p >= it->curves.rows() || k < 1)
      throw IoError("grid target refers to an unknown point");
    it->curves(p, k - 1) = to_double(row[ce]);
  }
  for (const auto& g : grid.ratings)
    if (g.curves.hasNaN()) throw IoError("grid targets file is incomplete");
  return grid;
}

}  // namespace bayesgrid::io
