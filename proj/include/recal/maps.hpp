#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "recal/errors.hpp"
#include "recal/text.hpp"

namespace recal::maps {

// Ordered support-point coordinates of one map axis.
class AxisGrid {
 public:
  AxisGrid() = default;

  explicit AxisGrid(std::vector<double> breakpoints) : points_(std::move(breakpoints)) {
    if (points_.size() < 2) throw ShapeError("axis needs at least 2 breakpoints");
    for (size_t i = 0; i < points_.size(); ++i) {
      if (!std::isfinite(points_[i])) throw ShapeError("axis breakpoint not finite");
      if (i > 0 && points_[i] <= points_[i - 1])
        throw ShapeError("axis breakpoints must be strictly increasing (index " +
                         std::to_string(i) + ")");
    }
  }

  size_t size() const { return points_.size(); }
  double operator[](size_t i) const { return points_[i]; }
  double front() const { return points_.front(); }
  double back() const { return points_.back(); }
  const std::vector<double>& points() const { return points_; }

  // Index of the cell containing q after clamping to the axis range, plus the
  // interpolation fraction within that cell.
  std::pair<size_t, double> locate(double q) const {
    if (q <= points_.front()) return {0, 0.0};
    if (q >= points_.back()) return {points_.size() - 2, 1.0};
    size_t hi = static_cast<size_t>(
        std::upper_bound(points_.begin(), points_.end(), q) - points_.begin());
    size_t lo = hi - 1;
    double frac = (q - points_[lo]) / (points_[hi] - points_[lo]);
    return {lo, frac};
  }

  bool operator==(const AxisGrid& other) const { return points_ == other.points_; }

 private:
  std::vector<double> points_;
};

// Dense row-major 2D value grid; shared by maps, delta grids, and visit
// histograms.
class Grid2 {
 public:
  Grid2() = default;
  Grid2(size_t nx, size_t ny, double fill = 0.0) : nx_(nx), ny_(ny), data_(nx * ny, fill) {}

  size_t nx() const { return nx_; }
  size_t ny() const { return ny_; }
  double& at(size_t i, size_t j) { return data_[i * ny_ + j]; }
  double at(size_t i, size_t j) const { return data_[i * ny_ + j]; }
  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  bool same_shape(const Grid2& other) const { return nx_ == other.nx_ && ny_ == other.ny_; }
  bool operator==(const Grid2& other) const {
    return nx_ == other.nx_ && ny_ == other.ny_ && data_ == other.data_;
  }

 private:
  size_t nx_ = 0;
  size_t ny_ = 0;
  std::vector<double> data_;
};

// Bound on how far one calibration pass may move a cell. The effective bound
// for a cell of value v is min(max_abs_delta, max_rel_delta * |v|), i.e. a
// fraction of the overall value with a hard ceiling.
struct DeltaClamp {
  double max_abs_delta = 0.0;  // map-value units
  double max_rel_delta = 0.0;  // fraction in (0, 1]

  void validate() const {
    if (!(max_abs_delta > 0.0)) throw ConfigError("max_abs_delta must be > 0");
    if (!(max_rel_delta > 0.0 && max_rel_delta <= 1.0))
      throw ConfigError("max_rel_delta must be in (0, 1]");
  }

  double bound_for(double cell_value) const {
    return std::min(max_abs_delta, max_rel_delta * std::abs(cell_value));
  }

  double clip(double delta, double cell_value) const {
    double b = bound_for(cell_value);
    return std::clamp(delta, -b, b);
  }
};

struct CellIndex {
  size_t i = 0;
  size_t j = 0;
  bool operator==(const CellIndex&) const = default;
};

// Audit record of a map change: what moved, by how much, and whether the
// result still looks like a calibration (gradient statistics).
struct MapDiffReport {
  Grid2 delta;                         // applied per-cell change
  Grid2 requested;                     // pre-clip change (equals delta for diff())
  std::vector<CellIndex> unchanged;    // cells with exactly zero applied delta
  double max_abs_change = 0.0;
  double rms_change = 0.0;
  double max_grad_x = 0.0;             // of the result map, per unit x
  double max_grad_y = 0.0;
  size_t clipped_cells = 0;
  double max_clip_amount = 0.0;        // largest |requested - applied|
};

class LookupMap2D {
 public:
  LookupMap2D() = default;

  LookupMap2D(AxisGrid x_axis, AxisGrid y_axis, Grid2 values, std::string name = "",
              std::string units = "", std::string version = "")
      : x_(std::move(x_axis)),
        y_(std::move(y_axis)),
        values_(std::move(values)),
        name_(std::move(name)),
        units_(std::move(units)),
        version_(std::move(version)) {
    if (values_.nx() != x_.size() || values_.ny() != y_.size())
      throw ShapeError("value grid shape " + std::to_string(values_.nx()) + "x" +
                       std::to_string(values_.ny()) + " does not match axes " +
                       std::to_string(x_.size()) + "x" + std::to_string(y_.size()));
    for (double v : values_.data())
      if (!std::isfinite(v)) throw ShapeError("map value not finite");
  }

  const AxisGrid& x_axis() const { return x_; }
  const AxisGrid& y_axis() const { return y_; }
  const Grid2& values() const { return values_; }
  double value(size_t i, size_t j) const { return values_.at(i, j); }
  const std::string& name() const { return name_; }
  const std::string& units() const { return units_; }
  const std::string& version() const { return version_; }

  bool same_axes(const LookupMap2D& other) const {
    return x_ == other.x_ && y_ == other.y_;
  }

  bool operator==(const LookupMap2D& other) const {
    return x_ == other.x_ && y_ == other.y_ && values_ == other.values_ &&
           name_ == other.name_ && units_ == other.units_ && version_ == other.version_;
  }

  LookupMap2D with_values(Grid2 values, std::string version) const {
    return LookupMap2D(x_, y_, std::move(values), name_, units_, std::move(version));
  }

 private:
  AxisGrid x_;
  AxisGrid y_;
  Grid2 values_;
  std::string name_;
  std::string units_;
  std::string version_;
};

// Bilinear evaluation; queries outside the axis range clamp to the nearest
// edge first, mirroring production ECU map behavior.
inline double interpolate(const LookupMap2D& map, double x, double y) {
  auto [i, fx] = map.x_axis().locate(x);
  auto [j, fy] = map.y_axis().locate(y);
  double v00 = map.value(i, j);
  double v01 = map.value(i, j + 1);
  double v10 = map.value(i + 1, j);
  double v11 = map.value(i + 1, j + 1);
  // symmetric weights: exact at both cell corners, unlike a + f*(b - a),
  // which picks up rounding at f = 1 (the last support point of each axis)
  double lo = v00 * (1.0 - fy) + v01 * fy;
  double hi = v10 * (1.0 - fy) + v11 * fy;
  return lo * (1.0 - fx) + hi * fx;
}

namespace detail {

inline void fill_gradients(const LookupMap2D& result, MapDiffReport& report) {
  const auto& g = result.values();
  for (size_t i = 0; i + 1 < g.nx(); ++i)
    for (size_t j = 0; j < g.ny(); ++j) {
      double dx = result.x_axis()[i + 1] - result.x_axis()[i];
      report.max_grad_x = std::max(report.max_grad_x, std::abs(g.at(i + 1, j) - g.at(i, j)) / dx);
    }
  for (size_t i = 0; i < g.nx(); ++i)
    for (size_t j = 0; j + 1 < g.ny(); ++j) {
      double dy = result.y_axis()[j + 1] - result.y_axis()[j];
      report.max_grad_y = std::max(report.max_grad_y, std::abs(g.at(i, j + 1) - g.at(i, j)) / dy);
    }
}

inline void fill_change_stats(MapDiffReport& report) {
  double sum_sq = 0.0;
  const Grid2& d = report.delta;
  for (size_t i = 0; i < d.nx(); ++i)
    for (size_t j = 0; j < d.ny(); ++j) {
      double v = d.at(i, j);
      sum_sq += v * v;
      report.max_abs_change = std::max(report.max_abs_change, std::abs(v));
      if (v == 0.0) report.unchanged.push_back({i, j});
    }
  report.rms_change = std::sqrt(sum_sq / static_cast<double>(d.nx() * d.ny()));
}

}  // namespace detail

// Add a delta grid to a map, respecting the per-cell clamp bound. Returns the
// new map and an audit report of applied vs. requested change.
inline std::pair<LookupMap2D, MapDiffReport> apply_deltas(const LookupMap2D& map,
                                                          const Grid2& deltas,
                                                          const DeltaClamp& clamp) {
  clamp.validate();
  if (!deltas.same_shape(map.values()))
    throw ShapeError("delta grid shape does not match map (" + std::to_string(deltas.nx()) +
                     "x" + std::to_string(deltas.ny()) + " vs " +
                     std::to_string(map.values().nx()) + "x" +
                     std::to_string(map.values().ny()) + ")");

  Grid2 out = map.values();
  MapDiffReport report;
  report.delta = Grid2(out.nx(), out.ny());
  report.requested = deltas;
  for (size_t i = 0; i < out.nx(); ++i)
    for (size_t j = 0; j < out.ny(); ++j) {
      double requested = deltas.at(i, j);
      double applied = clamp.clip(requested, out.at(i, j));
      if (applied != requested) {
        ++report.clipped_cells;
        report.max_clip_amount =
            std::max(report.max_clip_amount, std::abs(requested - applied));
      }
      report.delta.at(i, j) = applied;
      out.at(i, j) += applied;
    }

  LookupMap2D result = map.with_values(std::move(out), map.version() + "+");
  detail::fill_change_stats(report);
  detail::fill_gradients(result, report);
  return {std::move(result), std::move(report)};
}

// Cell-wise b - a plus gradient/rms statistics over the change.
inline MapDiffReport diff(const LookupMap2D& a, const LookupMap2D& b) {
  if (!a.same_axes(b)) throw ShapeError("map diff requires identical axes");
  MapDiffReport report;
  report.delta = Grid2(a.values().nx(), a.values().ny());
  for (size_t i = 0; i < report.delta.nx(); ++i)
    for (size_t j = 0; j < report.delta.ny(); ++j)
      report.delta.at(i, j) = b.value(i, j) - a.value(i, j);
  report.requested = report.delta;
  detail::fill_change_stats(report);
  detail::fill_gradients(b, report);
  return report;
}

// Text form: `name:` / `x_axis:` / `y_axis:` / `units:` / `version:` header
// lines, then one comma-separated row of values per x breakpoint. Numbers use
// the shortest round-trip form so diffs stay stable and values re-load
// bit-exactly.
inline std::string serialize(const LookupMap2D& map) {
  std::string out;
  out += "name: " + map.name() + "\n";
  out += "x_axis: " + text::join_doubles(map.x_axis().points()) + "\n";
  out += "y_axis: " + text::join_doubles(map.y_axis().points()) + "\n";
  out += "units: " + map.units() + "\n";
  out += "version: " + map.version() + "\n";
  for (size_t i = 0; i < map.values().nx(); ++i) {
    for (size_t j = 0; j < map.values().ny(); ++j) {
      if (j) out += ", ";
      out += text::format_double(map.value(i, j));
    }
    out += "\n";
  }
  return out;
}

inline LookupMap2D deserialize(const std::string& content) {
  std::string name, units, version;
  std::vector<double> xs, ys;
  bool have_x = false, have_y = false;
  std::vector<std::vector<double>> rows;
  int lineno = 0;
  for (auto raw : text::split(content, '\n')) {
    ++lineno;
    auto line = text::trim(raw);
    if (line.empty() || line.front() == '#') continue;
    std::string ctx = "map line " + std::to_string(lineno);
    size_t colon = line.find(':');
    bool is_header = rows.empty() && colon != std::string_view::npos &&
                     line.substr(0, colon).find(',') == std::string_view::npos &&
                     !std::isdigit(static_cast<unsigned char>(line.front())) &&
                     line.front() != '-' && line.front() != '+' && line.front() != '.';
    if (is_header) {
      std::string key(text::trim(line.substr(0, colon)));
      auto value = text::trim(line.substr(colon + 1));
      if (key == "name") name = std::string(value);
      else if (key == "units") units = std::string(value);
      else if (key == "version") version = std::string(value);
      else if (key == "x_axis") { xs = text::parse_double_list(value, ctx); have_x = true; }
      else if (key == "y_axis") { ys = text::parse_double_list(value, ctx); have_y = true; }
      else throw ParseError("unknown map header '" + key + "' (" + ctx + ")");
      continue;
    }
    rows.push_back(text::parse_double_list(line, ctx));
  }
  if (!have_x || !have_y) throw ParseError("map file missing x_axis/y_axis header");
  AxisGrid x_axis{xs}, y_axis{ys};
  if (rows.size() != x_axis.size())
    throw ParseError("map file has " + std::to_string(rows.size()) + " value rows, expected " +
                     std::to_string(x_axis.size()));
  Grid2 values(x_axis.size(), y_axis.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != y_axis.size())
      throw ParseError("map row " + std::to_string(i) + " has " +
                       std::to_string(rows[i].size()) + " values, expected " +
                       std::to_string(y_axis.size()));
    for (size_t j = 0; j < rows[i].size(); ++j) values.at(i, j) = rows[i][j];
  }
  return LookupMap2D(std::move(x_axis), std::move(y_axis), std::move(values), name, units,
                     version);
}

}  // namespace recal::maps
