#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "csnet/rng.hpp"

namespace csnet {

// Ordered list of 3D points. Order is semantically meaningful: samplers
// return indices into it, so no operation may silently reorder points.
// Coordinates are 32-bit; the 9-significant-digit text round-trip below
// is exact at this width.
struct PointCloud {
  std::vector<std::array<float, 3>> points;
  std::optional<int> label;
  std::string source_path;

  std::size_t size() const { return points.size(); }
};

enum class CloudFormat { xyz, off, ply_ascii };

namespace detail {

inline std::runtime_error parse_error(const std::string& path, std::size_t line,
                                      const std::string& what) {
  return std::runtime_error(path + ":" + std::to_string(line) + ": " + what);
}

inline bool parse_float(const std::string& token, float& out) {
  const char* begin = token.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0' || !std::isfinite(v)) return false;
  out = static_cast<float>(v);
  return true;
}

inline bool parse_point_line(const std::string& line, std::array<float, 3>& p) {
  std::istringstream ss(line);
  std::string a, b, c, extra;
  if (!(ss >> a >> b >> c)) return false;
  if (ss >> extra) return false;
  return parse_float(a, p[0]) && parse_float(b, p[1]) && parse_float(c, p[2]);
}

inline std::string format_point(const std::array<float, 3>& p) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g", static_cast<double>(p[0]),
                static_cast<double>(p[1]), static_cast<double>(p[2]));
  return buf;
}

inline bool blank(const std::string& s) {
  return s.find_first_not_of(" \t\r\n") == std::string::npos;
}

inline std::string trimmed(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline PointCloud read_cloud(const std::string& path, CloudFormat format) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  PointCloud cloud;
  cloud.source_path = path;
  std::string line;
  std::size_t lineno = 0;

  const auto next_line = [&](std::string& out) {
    while (std::getline(in, out)) {
      ++lineno;
      return true;
    }
    return false;
  };

  switch (format) {
    case CloudFormat::xyz: {
      while (next_line(line)) {
        if (detail::blank(line)) continue;
        if (detail::trimmed(line)[0] == '#') continue;
        std::array<float, 3> p;
        if (!detail::parse_point_line(line, p))
          throw detail::parse_error(path, lineno, "malformed xyz point line");
        cloud.points.push_back(p);
      }
      break;
    }
    case CloudFormat::off: {
      if (!next_line(line) || detail::trimmed(line) != "OFF")
        throw detail::parse_error(path, lineno ? lineno : 1,
                                  "expected OFF header");
      do {
        if (!next_line(line))
          throw detail::parse_error(path, lineno, "missing OFF counts line");
      } while (detail::blank(line) || detail::trimmed(line)[0] == '#');
      long vertices = -1, faces = -1, edges = -1;
      {
        std::istringstream ss(line);
        if (!(ss >> vertices >> faces >> edges) || vertices < 0)
          throw detail::parse_error(path, lineno, "malformed OFF counts line");
      }
      for (long i = 0; i < vertices; ++i) {
        do {
          if (!next_line(line))
            throw detail::parse_error(
                path, lineno,
                "vertex count mismatch: expected " + std::to_string(vertices) +
                    " vertices, file ends after " + std::to_string(i));
        } while (detail::blank(line) || detail::trimmed(line)[0] == '#');
        std::array<float, 3> p;
        if (!detail::parse_point_line(line, p))
          throw detail::parse_error(path, lineno, "malformed OFF vertex line");
        cloud.points.push_back(p);
      }
      // Faces, if any, are ignored.
      break;
    }
    case CloudFormat::ply_ascii: {
      if (!next_line(line) || detail::trimmed(line) != "ply")
        throw detail::parse_error(path, lineno ? lineno : 1, "expected ply magic");
      if (!next_line(line) || detail::trimmed(line) != "format ascii 1.0")
        throw detail::parse_error(path, lineno, "expected 'format ascii 1.0'");
      long vertices = -1;
      std::vector<std::string> properties;
      while (true) {
        if (!next_line(line))
          throw detail::parse_error(path, lineno, "unterminated ply header");
        const std::string t = detail::trimmed(line);
        if (t == "end_header") break;
        if (t.rfind("comment", 0) == 0) continue;
        std::istringstream ss(t);
        std::string word;
        ss >> word;
        if (word == "element") {
          std::string kind;
          long count = 0;
          if (!(ss >> kind >> count) || kind != "vertex" || count < 0)
            throw detail::parse_error(path, lineno,
                                      "only 'element vertex N' is supported");
          vertices = count;
        } else if (word == "property") {
          std::string type, name;
          if (!(ss >> type >> name) || type != "float")
            throw detail::parse_error(path, lineno,
                                      "only float x/y/z properties are supported");
          properties.push_back(name);
        } else {
          throw detail::parse_error(path, lineno, "unsupported ply header line");
        }
      }
      if (vertices < 0)
        throw detail::parse_error(path, lineno, "missing 'element vertex' line");
      if (properties != std::vector<std::string>{"x", "y", "z"})
        throw detail::parse_error(path, lineno,
                                  "ply must declare exactly float x, y, z");
      for (long i = 0; i < vertices; ++i) {
        do {
          if (!next_line(line))
            throw detail::parse_error(
                path, lineno,
                "vertex count mismatch: expected " + std::to_string(vertices) +
                    " vertices, file ends after " + std::to_string(i));
        } while (detail::blank(line));
        std::array<float, 3> p;
        if (!detail::parse_point_line(line, p))
          throw detail::parse_error(path, lineno, "malformed ply vertex line");
        cloud.points.push_back(p);
      }
      break;
    }
  }
  if (cloud.points.empty())
    throw std::runtime_error(path + ": cloud has no points");
  return cloud;
}

inline void write_cloud(const PointCloud& cloud, const std::string& path,
                        CloudFormat format) {
  if (format == CloudFormat::off)
    throw std::invalid_argument("OFF is read-only");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  if (format == CloudFormat::ply_ascii) {
    out << "ply\nformat ascii 1.0\nelement vertex " << cloud.points.size()
        << "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
  }
  for (const auto& p : cloud.points) out << detail::format_point(p) << "\n";
  if (!out) throw std::runtime_error("write failed for " + path);
}

inline CloudFormat format_from_path(const std::string& path) {
  const auto dot = path.rfind('.');
  const std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  if (ext == "xyz") return CloudFormat::xyz;
  if (ext == "off") return CloudFormat::off;
  if (ext == "ply") return CloudFormat::ply_ascii;
  throw std::invalid_argument("unknown cloud format for '" + path +
                              "' (expected .xyz, .off, or .ply)");
}

// Subtract centroid, divide by the max norm. An all-identical cloud maps
// every point to the origin (divisor clamped to 1).
inline PointCloud normalize_unit_sphere(const PointCloud& cloud) {
  if (cloud.points.empty()) throw std::invalid_argument("empty cloud");
  double cx = 0, cy = 0, cz = 0;
  for (const auto& p : cloud.points) {
    cx += p[0];
    cy += p[1];
    cz += p[2];
  }
  const double n = static_cast<double>(cloud.points.size());
  cx /= n;
  cy /= n;
  cz /= n;
  double max_norm = 0;
  for (const auto& p : cloud.points) {
    const double dx = p[0] - cx, dy = p[1] - cy, dz = p[2] - cz;
    max_norm = std::max(max_norm, std::sqrt(dx * dx + dy * dy + dz * dz));
  }
  const double div = max_norm > 0 ? max_norm : 1.0;
  PointCloud out = cloud;
  for (auto& p : out.points) {
    p[0] = static_cast<float>((p[0] - cx) / div);
    p[1] = static_cast<float>((p[1] - cy) / div);
    p[2] = static_cast<float>((p[2] - cz) / div);
  }
  return out;
}

struct AugmentOptions {
  bool rotation = true;
  std::array<double, 2> scale_range = {1.0, 1.0};
  bool full_so3 = false;  // default is rotation about the gravity (z) axis
};

inline PointCloud augment(const PointCloud& cloud, Rng& rng,
                          const AugmentOptions& opt) {
  if (!(opt.scale_range[0] > 0) || opt.scale_range[0] > opt.scale_range[1])
    throw std::invalid_argument("augment scale range must satisfy 0 < lo <= hi");
  double r[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  if (opt.rotation) {
    if (opt.full_so3) {
      // Uniform rotation from a normalized random quaternion.
      double q[4];
      double norm = 0;
      for (double& v : q) {
        v = rng.normal();
        norm += v * v;
      }
      norm = std::sqrt(norm);
      for (double& v : q) v /= norm;
      const double w = q[0], x = q[1], y = q[2], z = q[3];
      r[0][0] = 1 - 2 * (y * y + z * z);
      r[0][1] = 2 * (x * y - w * z);
      r[0][2] = 2 * (x * z + w * y);
      r[1][0] = 2 * (x * y + w * z);
      r[1][1] = 1 - 2 * (x * x + z * z);
      r[1][2] = 2 * (y * z - w * x);
      r[2][0] = 2 * (x * z - w * y);
      r[2][1] = 2 * (y * z + w * x);
      r[2][2] = 1 - 2 * (x * x + y * y);
    } else {
      const double theta = 2.0 * std::numbers::pi * rng.uniform();
      const double c = std::cos(theta), s = std::sin(theta);
      r[0][0] = c;
      r[0][1] = -s;
      r[1][0] = s;
      r[1][1] = c;
    }
  }
  const double scale = opt.scale_range[0] == opt.scale_range[1]
                           ? opt.scale_range[0]
                           : rng.uniform(opt.scale_range[0], opt.scale_range[1]);
  PointCloud out = cloud;
  for (auto& p : out.points) {
    const double x = p[0], y = p[1], z = p[2];
    p[0] = static_cast<float>(scale * (r[0][0] * x + r[0][1] * y + r[0][2] * z));
    p[1] = static_cast<float>(scale * (r[1][0] * x + r[1][1] * y + r[1][2] * z));
    p[2] = static_cast<float>(scale * (r[2][0] * x + r[2][1] * y + r[2][2] * z));
  }
  return out;
}

// ---- synthetic labeled dataset --------------------------------------

struct DatasetSpec {
  std::vector<std::string> class_names = default_class_names();
  std::size_t per_class = 150;
  std::size_t points_per_cloud = 256;
  std::uint64_t seed = 1;
  double noise_sigma = 0.0;

  static std::vector<std::string> default_class_names() {
    return {"sphere", "cube",    "cylinder",  "torus",
            "cone",   "pyramid", "ellipsoid", "helix"};
  }
};

namespace detail {

inline std::array<double, 3> unit_sphere_point(Rng& rng) {
  const double z = rng.uniform(-1.0, 1.0);
  const double phi = 2.0 * std::numbers::pi * rng.uniform();
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  return {r * std::cos(phi), r * std::sin(phi), z};
}

inline std::array<double, 3> surface_point(const std::string& cls, Rng& rng) {
  constexpr double pi = std::numbers::pi;
  if (cls == "sphere") {
    return unit_sphere_point(rng);
  }
  if (cls == "cube") {
    const int face = static_cast<int>(rng.uniform_index(6));
    const double u = rng.uniform(-1.0, 1.0), v = rng.uniform(-1.0, 1.0);
    const double s = face % 2 == 0 ? 1.0 : -1.0;
    switch (face / 2) {
      case 0: return {s, u, v};
      case 1: return {u, s, v};
      default: return {u, v, s};
    }
  }
  if (cls == "cylinder") {
    const double radius = 0.55, half_h = 1.0;
    const double lateral = 2 * pi * radius * (2 * half_h);
    const double caps = 2 * pi * radius * radius;
    if (rng.uniform() * (lateral + caps) < lateral) {
      const double theta = 2 * pi * rng.uniform();
      return {radius * std::cos(theta), radius * std::sin(theta),
              rng.uniform(-half_h, half_h)};
    }
    const double theta = 2 * pi * rng.uniform();
    const double r = radius * std::sqrt(rng.uniform());
    const double z = rng.uniform() < 0.5 ? -half_h : half_h;
    return {r * std::cos(theta), r * std::sin(theta), z};
  }
  if (cls == "torus") {
    const double major = 0.72, minor = 0.28;
    const double theta = 2 * pi * rng.uniform();
    // Area-corrected tube angle.
    double phi;
    while (true) {
      phi = 2 * pi * rng.uniform();
      if (rng.uniform() * (major + minor) <= major + minor * std::cos(phi)) break;
    }
    const double ring = major + minor * std::cos(phi);
    return {ring * std::cos(theta), ring * std::sin(theta), minor * std::sin(phi)};
  }
  if (cls == "cone") {
    const double base_r = 0.8, apex_z = 1.0, base_z = -1.0;
    const double slant = std::sqrt(base_r * base_r + (apex_z - base_z) * (apex_z - base_z));
    const double lateral = pi * base_r * slant;
    const double base = pi * base_r * base_r;
    const double theta = 2 * pi * rng.uniform();
    if (rng.uniform() * (lateral + base) < lateral) {
      const double t = std::sqrt(rng.uniform());  // area grows linearly from apex
      const double r = base_r * t;
      return {r * std::cos(theta), r * std::sin(theta),
              apex_z + t * (base_z - apex_z)};
    }
    const double r = base_r * std::sqrt(rng.uniform());
    return {r * std::cos(theta), r * std::sin(theta), base_z};
  }
  if (cls == "pyramid") {
    const double half = 0.75, base_z = -0.6, apex_z = 0.9;
    const std::array<double, 3> apex = {0, 0, apex_z};
    const std::array<std::array<double, 3>, 4> corners = {{{half, half, base_z},
                                                           {-half, half, base_z},
                                                           {-half, -half, base_z},
                                                           {half, -half, base_z}}};
    const auto tri_area = [](const std::array<double, 3>& a,
                             const std::array<double, 3>& b,
                             const std::array<double, 3>& c) {
      const double ux = b[0] - a[0], uy = b[1] - a[1], uz = b[2] - a[2];
      const double vx = c[0] - a[0], vy = c[1] - a[1], vz = c[2] - a[2];
      const double cx = uy * vz - uz * vy;
      const double cy = uz * vx - ux * vz;
      const double cz = ux * vy - uy * vx;
      return 0.5 * std::sqrt(cx * cx + cy * cy + cz * cz);
    };
    const double side_area = tri_area(apex, corners[0], corners[1]);
    const double base_area = (2 * half) * (2 * half);
    const double pick = rng.uniform() * (4 * side_area + base_area);
    if (pick < base_area) {
      return {rng.uniform(-half, half), rng.uniform(-half, half), base_z};
    }
    const int face = static_cast<int>(rng.uniform_index(4));
    const std::array<double, 3>& b = corners[face];
    const std::array<double, 3>& c = corners[(face + 1) % 4];
    double u = rng.uniform(), v = rng.uniform();
    if (u + v > 1) {
      u = 1 - u;
      v = 1 - v;
    }
    return {apex[0] + u * (b[0] - apex[0]) + v * (c[0] - apex[0]),
            apex[1] + u * (b[1] - apex[1]) + v * (c[1] - apex[1]),
            apex[2] + u * (b[2] - apex[2]) + v * (c[2] - apex[2])};
  }
  if (cls == "ellipsoid") {
    const double a = 1.0, b = 0.72, c = 0.55;
    // Rejection on the surface-area density of the sphere-to-ellipsoid map.
    while (true) {
      const auto s = unit_sphere_point(rng);
      const double gx = b * c * s[0], gy = a * c * s[1], gz = a * b * s[2];
      const double w = std::sqrt(gx * gx + gy * gy + gz * gz);
      if (rng.uniform() * (a * b) <= w) return {a * s[0], b * s[1], c * s[2]};
    }
  }
  if (cls == "helix") {
    const double curve_r = 0.68, tube_r = 0.14, turns = 2.5, height = 1.8;
    const double t = rng.uniform();
    const double s = 2 * pi * turns * t;
    const double psi = 2 * pi * rng.uniform();
    const double pitch = height / (2 * pi * turns);
    // Frenet frame of (r cos s, r sin s, pitch s).
    const double tn = std::sqrt(curve_r * curve_r + pitch * pitch);
    const std::array<double, 3> tangent = {-curve_r * std::sin(s) / tn,
                                           curve_r * std::cos(s) / tn, pitch / tn};
    const std::array<double, 3> normal = {-std::cos(s), -std::sin(s), 0};
    const std::array<double, 3> binormal = {
        tangent[1] * normal[2] - tangent[2] * normal[1],
        tangent[2] * normal[0] - tangent[0] * normal[2],
        tangent[0] * normal[1] - tangent[1] * normal[0]};
    const double cx = curve_r * std::cos(s), cy = curve_r * std::sin(s),
                 cz = height * (t - 0.5);
    return {cx + tube_r * (std::cos(psi) * normal[0] + std::sin(psi) * binormal[0]),
            cy + tube_r * (std::cos(psi) * normal[1] + std::sin(psi) * binormal[1]),
            cz + tube_r * (std::cos(psi) * normal[2] + std::sin(psi) * binormal[2])};
  }
  throw std::invalid_argument("unknown class name '" + cls + "'");
}

}  // namespace detail

// Pure function of the spec: same spec + seed gives byte-identical clouds.
inline std::vector<PointCloud> generate_dataset(const DatasetSpec& spec) {
  if (spec.per_class < 1) throw std::invalid_argument("per_class must be >= 1");
  if (spec.points_per_cloud < 8)
    throw std::invalid_argument("points_per_cloud must be >= 8");
  for (const auto& cls : spec.class_names) {
    Rng probe(0);
    detail::surface_point(cls, probe);  // validates the name
  }
  std::vector<PointCloud> clouds;
  clouds.reserve(spec.class_names.size() * spec.per_class);
  for (std::size_t ci = 0; ci < spec.class_names.size(); ++ci) {
    for (std::size_t j = 0; j < spec.per_class; ++j) {
      Rng rng(Rng::derive_seed(spec.seed, ci, j));
      PointCloud cloud;
      cloud.label = static_cast<int>(ci);
      cloud.points.reserve(spec.points_per_cloud);
      for (std::size_t p = 0; p < spec.points_per_cloud; ++p) {
        auto pt = detail::surface_point(spec.class_names[ci], rng);
        if (spec.noise_sigma > 0)
          for (double& coord : pt) coord += spec.noise_sigma * rng.normal();
        cloud.points.push_back({static_cast<float>(pt[0]),
                                static_cast<float>(pt[1]),
                                static_cast<float>(pt[2])});
      }
      clouds.push_back(normalize_unit_sphere(cloud));
    }
  }
  return clouds;
}

// Variant used by generators that want raw (pre-normalization) surfaces,
// e.g. the sphere-radius test.
inline PointCloud generate_raw_cloud(const std::string& cls, std::size_t n,
                                     std::uint64_t seed, double noise_sigma) {
  Rng rng(seed);
  PointCloud cloud;
  cloud.points.reserve(n);
  for (std::size_t p = 0; p < n; ++p) {
    auto pt = detail::surface_point(cls, rng);
    if (noise_sigma > 0)
      for (double& coord : pt) coord += noise_sigma * rng.normal();
    cloud.points.push_back({static_cast<float>(pt[0]), static_cast<float>(pt[1]),
                            static_cast<float>(pt[2])});
  }
  return cloud;
}

struct DatasetSplit {
  std::vector<PointCloud> train;
  std::vector<PointCloud> test;
};

// Disjoint train/test partition by seeded shuffle within each class.
inline DatasetSplit split_dataset(const std::vector<PointCloud>& clouds,
                                  double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0) || !(train_fraction < 1.0))
    throw std::invalid_argument("train_fraction must be in (0, 1)");
  int max_label = -1;
  for (const auto& c : clouds)
    max_label = std::max(max_label, c.label.value_or(-1));
  DatasetSplit split;
  for (int cls = 0; cls <= max_label; ++cls) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < clouds.size(); ++i)
      if (clouds[i].label.value_or(-1) == cls) idx.push_back(i);
    Rng rng(Rng::derive_seed(seed, static_cast<std::uint64_t>(cls), 0x5911dULL));
    rng.shuffle(idx);
    const std::size_t train_count =
        static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(idx.size())));
    for (std::size_t j = 0; j < idx.size(); ++j)
      (j < train_count ? split.train : split.test).push_back(clouds[idx[j]]);
  }
  return split;
}

}  // namespace csnet
