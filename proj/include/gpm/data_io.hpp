#pragma once

// Dataset ingestion (xyz / ASCII PLY), synthetic analytic shapes,
// normalisation and resampling, and point-cloud file emission
// (xyz, SVG projections, token dumps).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "gpm/common/error.hpp"
#include "gpm/common/random.hpp"
#include "gpm/geometry.hpp"

namespace gpm {

struct DatasetItem {
  std::string id;
  PointCloud cloud;
  int label = -1;  // -1: unlabeled
};

struct Dataset {
  std::vector<DatasetItem> items;
  std::vector<std::string> class_names;

  std::size_t size() const { return items.size(); }

  void validate() const {
    std::vector<std::string> ids;
    for (const auto& it : items) {
      ids.push_back(it.id);
      if (it.label >= static_cast<int>(class_names.size()))
        throw DataError("dataset item '" + it.id + "' has label " + std::to_string(it.label) + " outside " +
                        std::to_string(class_names.size()) + " classes");
    }
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw DataError("dataset ids are not unique");
  }
};

enum class CloudFormat { xyz, ply_ascii };

inline CloudFormat parse_cloud_format(const std::string& s) {
  if (s == "xyz") return CloudFormat::xyz;
  if (s == "ply" || s == "ply_ascii") return CloudFormat::ply_ascii;
  throw InvalidArgument("unknown point-cloud format '" + s + "'");
}

inline CloudFormat format_from_extension(const std::filesystem::path& p) {
  const auto ext = p.extension().string();
  if (ext == ".ply") return CloudFormat::ply_ascii;
  if (ext == ".xyz" || ext == ".txt") return CloudFormat::xyz;
  throw InvalidArgument("cannot infer point-cloud format from '" + p.string() + "'");
}

namespace detail {
inline bool parse_doubles(const std::string& line, std::vector<double>& out) {
  out.clear();
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) {
    try {
      std::size_t used = 0;
      double v = std::stod(tok, &used);
      if (used != tok.size() || !std::isfinite(v)) return false;
      out.push_back(v);
    } catch (...) {
      return false;
    }
  }
  return true;
}

inline bool blank(const std::string& line) {
  return line.find_first_not_of(" \t\r") == std::string::npos;
}
}  // namespace detail

inline PointCloud load_cloud(const std::string& path, CloudFormat format) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open point cloud: " + path);
  PointCloud pc;
  std::string line;
  std::vector<double> vals;
  std::size_t lineno = 0;
  if (format == CloudFormat::xyz) {
    while (std::getline(in, line)) {
      ++lineno;
      if (detail::blank(line) || line[line.find_first_not_of(" \t")] == '#') continue;
      if (!detail::parse_doubles(line, vals) || vals.size() < 3)
        throw ParseError(path + ":" + std::to_string(lineno) + ": expected 'x y z'");
      pc.points.push_back({vals[0], vals[1], vals[2]});
    }
  } else {
    std::getline(in, line);
    ++lineno;
    if (line.rfind("ply", 0) != 0) throw ParseError(path + ":1: missing 'ply' magic");
    std::size_t vertex_count = 0;
    bool in_vertex = false, ascii = false;
    std::vector<std::string> vprops;
    while (std::getline(in, line)) {
      ++lineno;
      std::istringstream ss(line);
      std::string kw;
      ss >> kw;
      if (kw == "format") {
        std::string f;
        ss >> f;
        ascii = f == "ascii";
      } else if (kw == "element") {
        std::string name;
        std::size_t count = 0;
        ss >> name >> count;
        in_vertex = name == "vertex";
        if (in_vertex) vertex_count = count;
      } else if (kw == "property" && in_vertex) {
        std::string type, name;
        ss >> type >> name;
        vprops.push_back(name);
      } else if (kw == "end_header") {
        break;
      }
    }
    if (!ascii) throw ParseError(path + ": only ASCII PLY is supported");
    auto pos = [&](const char* n) {
      auto it = std::find(vprops.begin(), vprops.end(), n);
      if (it == vprops.end()) throw ParseError(path + ": vertex element lacks property '" + n + "'");
      return static_cast<std::size_t>(it - vprops.begin());
    };
    const std::size_t ix = pos("x"), iy = pos("y"), iz = pos("z");
    while (pc.points.size() < vertex_count && std::getline(in, line)) {
      ++lineno;
      if (detail::blank(line)) continue;
      if (!detail::parse_doubles(line, vals) || vals.size() < vprops.size())
        throw ParseError(path + ":" + std::to_string(lineno) + ": malformed vertex line");
      pc.points.push_back({vals[ix], vals[iy], vals[iz]});
    }
    if (pc.points.size() < vertex_count) throw ParseError(path + ": file ends before all vertices were read");
  }
  if (pc.points.empty()) throw ParseError(path + ": point cloud has no points");
  return pc;
}

inline PointCloud load_cloud(const std::string& path) { return load_cloud(path, format_from_extension(path)); }

/// xyz output, one "x y z" line per point, 9 significant digits.
inline void write_cloud(const std::string& path, const PointCloud& cloud) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write point cloud: " + path);
  os << std::setprecision(9);
  for (const auto& p : cloud.points) os << p[0] << ' ' << p[1] << ' ' << p[2] << '\n';
  if (!os) throw IoError("failed writing point cloud: " + path);
}

/// Subtract the centroid, then divide by the largest norm. An all-coincident
/// cloud is returned centered but unscaled.
inline PointCloud normalize_unit_sphere(const PointCloud& cloud) {
  if (cloud.empty()) throw InvalidArgument("normalize_unit_sphere: empty cloud");
  Point3 c{0, 0, 0};
  for (const auto& p : cloud.points)
    for (int d = 0; d < 3; ++d) c[d] += p[d];
  for (int d = 0; d < 3; ++d) c[d] /= static_cast<double>(cloud.size());
  PointCloud out = cloud;
  double r = 0.0;
  for (auto& p : out.points) {
    for (int d = 0; d < 3; ++d) p[d] -= c[d];
    r = std::max(r, std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]));
  }
  if (r > 0.0)
    for (auto& p : out.points)
      for (int d = 0; d < 3; ++d) p[d] /= r;
  return out;
}

/// n points without replacement when N >= n; otherwise every point once plus
/// n - N uniform draws with replacement.
inline PointCloud sample_n(const PointCloud& cloud, std::size_t n, std::uint64_t seed) {
  if (cloud.empty()) throw InvalidArgument("sample_n: empty cloud");
  Rng rng = make_rng(seed, {0x5A3ULL});
  const std::size_t N = cloud.size();
  PointCloud out;
  out.points.reserve(n);
  if (N >= n) {
    std::vector<std::size_t> idx(N);
    for (std::size_t i = 0; i < N; ++i) idx[i] = i;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t j = i + uniform_index(rng, N - i);
      std::swap(idx[i], idx[j]);
      out.points.push_back(cloud[idx[i]]);
    }
  } else {
    out.points = cloud.points;
    while (out.size() < n) out.points.push_back(cloud[uniform_index(rng, N)]);
  }
  return out;
}

// ------------------------------------------------------------ synthetic shapes

enum class ShapeFamily { sphere, cube, cylinder, torus, cone, ellipsoid };

inline const char* family_name(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::sphere: return "sphere";
    case ShapeFamily::cube: return "cube";
    case ShapeFamily::cylinder: return "cylinder";
    case ShapeFamily::torus: return "torus";
    case ShapeFamily::cone: return "cone";
    case ShapeFamily::ellipsoid: return "ellipsoid";
  }
  return "unknown";
}

inline ShapeFamily parse_family(const std::string& s) {
  for (auto f : {ShapeFamily::sphere, ShapeFamily::cube, ShapeFamily::cylinder, ShapeFamily::torus, ShapeFamily::cone,
                 ShapeFamily::ellipsoid})
    if (s == family_name(f)) return f;
  throw InvalidArgument("unknown shape family '" + s + "'");
}

struct SyntheticShapeSpec {
  ShapeFamily family = ShapeFamily::sphere;
  double scale_jitter = 0.15;     // per-axis scale drawn from [1 - j, 1 + j]
  double rotation_jitter = 0.5;   // radians, about each axis
  std::size_t points = 1024;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
};

/// One point drawn (area-uniformly where cheap) from the canonical surface
/// of a family. Canonical sizes fit in [-1, 1]^3.
inline Point3 sample_surface_point(ShapeFamily family, Rng& rng) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  switch (family) {
    case ShapeFamily::sphere:
    case ShapeFamily::ellipsoid: {
      double x, y, z, n;
      do {
        x = normal01(rng);
        y = normal01(rng);
        z = normal01(rng);
        n = std::sqrt(x * x + y * y + z * z);
      } while (n < 1e-12);
      if (family == ShapeFamily::ellipsoid) return {x / n, 0.6 * y / n, 0.35 * z / n};
      return {x / n, y / n, z / n};
    }
    case ShapeFamily::cube: {
      const std::size_t face = uniform_index(rng, 6);
      const double u = 2.0 * uniform01(rng) - 1.0, v = 2.0 * uniform01(rng) - 1.0;
      const double s = face % 2 == 0 ? 1.0 : -1.0;
      switch (face / 2) {
        case 0: return {s, u, v};
        case 1: return {u, s, v};
        default: return {u, v, s};
      }
    }
    case ShapeFamily::cylinder: {
      const double r = 0.6, h = 2.0;
      const double side = two_pi * r * h, cap = std::numbers::pi * r * r;
      const double pick = uniform01(rng) * (side + 2 * cap);
      if (pick < side) {
        const double t = two_pi * uniform01(rng);
        return {r * std::cos(t), r * std::sin(t), h * (uniform01(rng) - 0.5)};
      }
      const double t = two_pi * uniform01(rng), rr = r * std::sqrt(uniform01(rng));
      return {rr * std::cos(t), rr * std::sin(t), pick < side + cap ? h / 2 : -h / 2};
    }
    case ShapeFamily::torus: {
      const double R = 0.7, r = 0.3;
      double phi;
      do {
        phi = two_pi * uniform01(rng);
      } while (uniform01(rng) * (R + r) > R + r * std::cos(phi));
      const double t = two_pi * uniform01(rng);
      return {(R + r * std::cos(phi)) * std::cos(t), (R + r * std::cos(phi)) * std::sin(t), r * std::sin(phi)};
    }
    case ShapeFamily::cone: {
      const double r = 0.8, h = 2.0;
      const double slant = std::sqrt(r * r + h * h);
      const double side = std::numbers::pi * r * slant, base = std::numbers::pi * r * r;
      const double t = two_pi * uniform01(rng);
      if (uniform01(rng) * (side + base) < side) {
        const double f = std::sqrt(uniform01(rng));  // distance fraction from apex
        return {f * r * std::cos(t), f * r * std::sin(t), h / 2 - f * h};
      }
      const double rr = r * std::sqrt(uniform01(rng));
      return {rr * std::cos(t), rr * std::sin(t), -h / 2};
    }
  }
  return {0, 0, 0};
}

inline std::array<std::array<double, 3>, 3> rotation_xyz(double a, double b, double c) {
  const double ca = std::cos(a), sa = std::sin(a), cb = std::cos(b), sb = std::sin(b), cc = std::cos(c), sc = std::sin(c);
  // Rz(c) * Ry(b) * Rx(a)
  return {{{cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa},
           {sc * cb, sc * sb * sa + cc * ca, sc * sb * ca - cc * sa},
           {-sb, cb * sa, cb * ca}}};
}

/// One jittered, noisy, unit-sphere-normalised instance of a family.
inline PointCloud synth_shape(const SyntheticShapeSpec& spec, Rng& rng) {
  if (spec.noise_sigma < 0) throw InvalidArgument("synth_shape: noise sigma must be non-negative");
  if (spec.points == 0) throw InvalidArgument("synth_shape: point count must be positive");
  Point3 scale;
  for (auto& s : scale) s = 1.0 + spec.scale_jitter * (2.0 * uniform01(rng) - 1.0);
  const auto rot = rotation_xyz(spec.rotation_jitter * (2.0 * uniform01(rng) - 1.0),
                                spec.rotation_jitter * (2.0 * uniform01(rng) - 1.0),
                                spec.rotation_jitter * (2.0 * uniform01(rng) - 1.0));
  PointCloud pc;
  pc.points.reserve(spec.points);
  for (std::size_t i = 0; i < spec.points; ++i) {
    Point3 p = sample_surface_point(spec.family, rng);
    for (int d = 0; d < 3; ++d) p[d] *= scale[d];
    Point3 q{0, 0, 0};
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) q[r] += rot[r][c] * p[c];
    if (spec.noise_sigma > 0)
      for (auto& v : q) v += spec.noise_sigma * normal01(rng);
    pc.points.push_back(q);
  }
  return normalize_unit_sphere(pc);
}

/// per_class instances of every spec; label = position of the spec in `specs`.
inline Dataset synth_dataset(const std::vector<SyntheticShapeSpec>& specs, std::size_t per_class) {
  if (specs.empty()) throw InvalidArgument("synth_dataset: no shape specs");
  Dataset ds;
  for (std::size_t c = 0; c < specs.size(); ++c) ds.class_names.push_back(family_name(specs[c].family));
  for (std::size_t c = 0; c < specs.size(); ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      Rng rng = make_rng(specs[c].seed, {0x5E7ULL, c, i});
      std::ostringstream id;
      id << family_name(specs[c].family) << '_' << std::setw(4) << std::setfill('0') << i;
      ds.items.push_back({id.str(), synth_shape(specs[c], rng), static_cast<int>(c)});
    }
  return ds;
}

/// Convenience: the first `classes` families with shared jitter settings.
inline Dataset synth_families(std::size_t classes, std::size_t per_class, std::size_t points, std::uint64_t seed,
                              double noise_sigma = 0.0) {
  static constexpr ShapeFamily order[] = {ShapeFamily::sphere, ShapeFamily::cube, ShapeFamily::torus,
                                          ShapeFamily::cylinder, ShapeFamily::cone, ShapeFamily::ellipsoid};
  if (classes < 1 || classes > std::size(order)) throw InvalidArgument("synth_families: 1..6 classes supported");
  std::vector<SyntheticShapeSpec> specs;
  for (std::size_t c = 0; c < classes; ++c) {
    SyntheticShapeSpec s;
    s.family = order[c];
    s.points = points;
    s.noise_sigma = noise_sigma;
    s.seed = seed;
    specs.push_back(s);
  }
  return synth_dataset(specs, per_class);
}

/// Loads every .xyz/.ply file under `dir`. Sub-directories become classes
/// (sorted by name); files directly in `dir` are unlabeled.
inline Dataset load_dataset_dir(const std::string& dir, std::size_t points, std::uint64_t seed) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir);
  Dataset ds;
  auto is_cloud = [](const fs::path& p) {
    const auto e = p.extension().string();
    return e == ".xyz" || e == ".ply";
  };
  std::vector<fs::path> classes, loose;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) classes.push_back(e.path());
    else if (is_cloud(e.path())) loose.push_back(e.path());
  }
  std::sort(classes.begin(), classes.end());
  std::sort(loose.begin(), loose.end());
  auto add = [&](const fs::path& p, int label, const std::string& prefix) {
    PointCloud pc = normalize_unit_sphere(load_cloud(p.string()));
    if (points > 0) pc = sample_n(pc, points, derive_seed(seed, {ds.items.size()}));
    ds.items.push_back({prefix + p.stem().string(), std::move(pc), label});
  };
  for (const auto& p : loose) add(p, -1, "");
  for (std::size_t c = 0; c < classes.size(); ++c) {
    ds.class_names.push_back(classes[c].filename().string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(classes[c]))
      if (is_cloud(e.path())) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& p : files) add(p, static_cast<int>(c), classes[c].filename().string() + "/");
  }
  if (ds.items.empty()) throw DataError("dataset directory contains no .xyz/.ply files: " + dir);
  ds.validate();
  return ds;
}

// ------------------------------------------------------------ figures

struct SvgLayout {
  static constexpr double panel = 300.0;
  static constexpr double margin = 20.0;
  static constexpr double scale = 130.0;  // pixels per model unit
  static constexpr double width = 3 * panel + 4 * margin;
  static constexpr double height = panel + 2 * margin + 20.0;

  /// Pixel position of panel `i`'s center (i = 0: XY, 1: XZ, 2: YZ).
  static std::array<double, 2> center(int i) {
    return {margin + i * (panel + margin) + panel / 2, margin + panel / 2};
  }
};

/// Three orthographic scatter panels (XY, XZ, YZ) on a fixed canvas.
inline void write_svg_projections(const PointCloud& cloud, const std::string& path, const std::string& title = "") {
  if (cloud.empty()) throw InvalidArgument("write_svg_projections: empty cloud");
  std::ofstream os(path);
  if (!os) throw IoError("cannot write SVG: " + path);
  using L = SvgLayout;
  os << std::fixed << std::setprecision(2);
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << L::width << "\" height=\"" << L::height
     << "\" viewBox=\"0 0 " << L::width << ' ' << L::height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!title.empty()) os << "<title>" << title << "</title>\n";
  const int axes[3][2] = {{0, 1}, {0, 2}, {1, 2}};
  const char* names = "xyz";
  for (int i = 0; i < 3; ++i) {
    const auto c = L::center(i);
    const double x0 = c[0] - L::panel / 2, y0 = c[1] - L::panel / 2;
    os << "<g id=\"panel-" << names[axes[i][0]] << names[axes[i][1]] << "\">\n";
    os << "<rect x=\"" << x0 << "\" y=\"" << y0 << "\" width=\"" << L::panel << "\" height=\"" << L::panel
       << "\" fill=\"none\" stroke=\"#999\"/>\n";
    os << "<line x1=\"" << x0 << "\" y1=\"" << c[1] << "\" x2=\"" << x0 + L::panel << "\" y2=\"" << c[1]
       << "\" stroke=\"#ddd\"/>\n";
    os << "<line x1=\"" << c[0] << "\" y1=\"" << y0 << "\" x2=\"" << c[0] << "\" y2=\"" << y0 + L::panel
       << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << x0 + L::panel - 12 << "\" y=\"" << c[1] - 4 << "\" font-size=\"12\">" << names[axes[i][0]]
       << "</text>\n";
    os << "<text x=\"" << c[0] + 4 << "\" y=\"" << y0 + 12 << "\" font-size=\"12\">" << names[axes[i][1]] << "</text>\n";
    for (const auto& p : cloud.points) {
      const double px = c[0] + L::scale * p[axes[i][0]];
      const double py = c[1] - L::scale * p[axes[i][1]];
      os << "<circle cx=\"" << px << "\" cy=\"" << py << "\" r=\"1.5\" fill=\"#1f4e99\"/>\n";
    }
    os << "</g>\n";
  }
  os << "</svg>\n";
  if (!os) throw IoError("failed writing SVG: " + path);
}

/// One line per cloud: id, m, then m tokens.
inline void write_token_line(std::ostream& os, const std::string& id, const std::vector<std::size_t>& tokens) {
  os << id << ' ' << tokens.size();
  for (auto t : tokens) os << ' ' << t;
  os << '\n';
}

struct TokenDumpLine {
  std::string id;
  std::vector<std::size_t> tokens;
};

inline std::vector<TokenDumpLine> read_token_dump(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open token dump: " + path);
  std::vector<TokenDumpLine> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::blank(line)) continue;
    std::istringstream ss(line);
    TokenDumpLine t;
    std::size_t m = 0;
    if (!(ss >> t.id >> m)) throw ParseError(path + ":" + std::to_string(lineno) + ": expected 'id m tokens...'");
    t.tokens.resize(m);
    for (auto& v : t.tokens)
      if (!(ss >> v)) throw ParseError(path + ":" + std::to_string(lineno) + ": fewer tokens than declared");
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace gpm
