#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <png.h>

#include <nlohmann/json.hpp>

#include "nrmvs/camera.hpp"
#include "nrmvs/core.hpp"
#include "nrmvs/defgraph.hpp"
#include "nrmvs/image.hpp"
#include "nrmvs/patchmatch.hpp"
#include "nrmvs/pipeline.hpp"

namespace nrmvs {

using json = nlohmann::json;

// All artifact writes go through a temp file in the same directory followed
// by a rename, so readers never observe partial files.
inline void atomic_write(const std::filesystem::path& path,
                         const std::string& bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + path.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

// ---- PFM (grayscale, scale -1 = little-endian, rows bottom-up) ----

inline void write_pfm(const std::filesystem::path& path, const Image& im) {
  if (im.empty()) throw IoError("refusing to write empty PFM: " + path.string());
  std::string bytes = "Pf\n" + std::to_string(im.width) + " " +
                      std::to_string(im.height) + "\n-1.0\n";
  bytes.reserve(bytes.size() + im.data.size() * 4);
  for (int y = im.height - 1; y >= 0; --y) {
    const char* row = reinterpret_cast<const char*>(&im.data[
        static_cast<std::size_t>(y) * im.width]);
    bytes.append(row, static_cast<std::size_t>(im.width) * 4);
  }
  atomic_write(path, bytes);
}

inline Image read_pfm(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  std::istringstream head(bytes);
  std::string magic;
  int w = 0, h = 0;
  double scale = 0;
  head >> magic >> w >> h >> scale;
  if (magic != "Pf" || w <= 0 || h <= 0)
    throw IoError("not a grayscale PFM: " + path.string());
  if (scale >= 0)
    throw IoError("big-endian PFM unsupported: " + path.string());
  head.get();  // single whitespace after the scale
  const std::size_t offset = static_cast<std::size_t>(head.tellg());
  const std::size_t need = static_cast<std::size_t>(w) * h * 4;
  if (bytes.size() < offset + need)
    throw IoError("truncated PFM: " + path.string());
  Image im(w, h);
  for (int y = 0; y < h; ++y)
    std::memcpy(&im.data[static_cast<std::size_t>(h - 1 - y) * w],
                bytes.data() + offset + static_cast<std::size_t>(y) * w * 4,
                static_cast<std::size_t>(w) * 4);
  return im;
}

// ---- PLY (binary little-endian, x y z nx ny nz red green blue) ----

inline void write_ply(const std::filesystem::path& path, const PointCloud& pc) {
  std::string bytes =
      "ply\nformat binary_little_endian 1.0\nelement vertex " +
      std::to_string(pc.size()) +
      "\nproperty float x\nproperty float y\nproperty float z\n"
      "property float nx\nproperty float ny\nproperty float nz\n"
      "property uchar red\nproperty uchar green\nproperty uchar blue\n"
      "end_header\n";
  bytes.reserve(bytes.size() + pc.size() * 27);
  for (std::size_t i = 0; i < pc.size(); ++i) {
    float v[6] = {pc.xyz[i].x(), pc.xyz[i].y(), pc.xyz[i].z(),
                  pc.normal[i].x(), pc.normal[i].y(), pc.normal[i].z()};
    bytes.append(reinterpret_cast<const char*>(v), 24);
    bytes.append(reinterpret_cast<const char*>(pc.rgb[i].data()), 3);
  }
  atomic_write(path, bytes);
}

inline PointCloud read_ply(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::size_t hdr_end = bytes.find("end_header\n");
  if (hdr_end == std::string::npos)
    throw IoError("not a PLY file: " + path.string());
  std::istringstream head(bytes.substr(0, hdr_end));
  std::string line;
  std::size_t count = 0;
  bool binary_le = false;
  std::vector<std::string> props;
  while (std::getline(head, line)) {
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "format") {
      std::string fmt;
      ls >> fmt;
      binary_le = fmt == "binary_little_endian";
    } else if (tok == "element") {
      std::string name;
      ls >> name >> count;
      if (name != "vertex") throw IoError("unsupported PLY element: " + name);
    } else if (tok == "property") {
      std::string type, name;
      ls >> type >> name;
      props.push_back(type + " " + name);
    }
  }
  const std::vector<std::string> expect = {
      "float x",  "float y",  "float z",    "float nx",      "float ny",
      "float nz", "uchar red", "uchar green", "uchar blue"};
  if (!binary_le || props != expect)
    throw IoError("unsupported PLY layout: " + path.string());
  const std::size_t offset = hdr_end + 11;
  if (bytes.size() < offset + count * 27)
    throw IoError("truncated PLY: " + path.string());
  PointCloud pc;
  pc.xyz.resize(count);
  pc.normal.resize(count);
  pc.rgb.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const char* rec = bytes.data() + offset + i * 27;
    float v[6];
    std::memcpy(v, rec, 24);
    pc.xyz[i] = Vec3f(v[0], v[1], v[2]);
    pc.normal[i] = Vec3f(v[3], v[4], v[5]);
    std::memcpy(pc.rgb[i].data(), rec + 24, 3);
  }
  return pc;
}

// ---- PNG (8-bit grayscale) ----

inline void write_png_gray(const std::filesystem::path& path, const Image& im) {
  if (im.empty()) throw IoError("refusing to write empty PNG: " + path.string());
  const std::filesystem::path tmp = path.string() + ".tmp";
  FILE* fp = std::fopen(tmp.c_str(), "wb");
  if (!fp) throw IoError("cannot open for writing: " + tmp.string());
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    throw IoError("png write failed: " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(im.width),
               static_cast<png_uint_32>(im.height), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<std::size_t>(im.width));
  for (int y = 0; y < im.height; ++y) {
    for (int x = 0; x < im.width; ++x)
      row[x] = static_cast<png_byte>(
          std::clamp(std::lround(im.at(x, y) * 255.f), 0l, 255l));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + path.string() + ": " + ec.message());
}

inline Image read_png_gray(const std::filesystem::path& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw IoError("cannot open: " + path.string());
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(fp);
    throw IoError("png read failed: " + path.string());
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  // Normalize to 8-bit grayscale whatever the source layout.
  png_set_expand(png);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  const png_byte color = png_get_color_type(png, info);
  if (color & PNG_COLOR_MASK_COLOR)
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  Image im(w, h);
  std::vector<png_byte> row(static_cast<std::size_t>(w));
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x) im.at(x, y) = row[x] / 255.f;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return im;
}

// ---- JSON helpers ----

inline json parse_json(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1;
    const std::size_t upto = std::min(e.byte, text.size());
    for (std::size_t i = 0; i < upto; ++i)
      if (text[i] == '\n') ++line;
    throw IoError("parse error in " + path.string() + " at line " +
                  std::to_string(line) + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  atomic_write(path, j.dump(2) + "\n");
}

namespace detail {

inline json mat3_to_json(const Mat3& m) {
  json a = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) a.push_back(m(r, c));
  return a;
}

inline Mat3 mat3_from_json(const json& a) {
  if (!a.is_array() || a.size() != 9) throw IoError("expected 9-element matrix");
  Mat3 m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = a[3 * r + c].get<double>();
  return m;
}

inline json vec3_to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

inline Vec3 vec3_from_json(const json& a) {
  if (!a.is_array() || a.size() != 3) throw IoError("expected 3-element vector");
  return Vec3(a[0].get<double>(), a[1].get<double>(), a[2].get<double>());
}

}  // namespace detail

// ---- Cameras ----

struct CameraRecord {
  Mat3 K = Mat3::Identity();
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();
  std::string image_path;
};

inline void save_cameras(const std::filesystem::path& path,
                         const std::vector<CameraRecord>& cams) {
  json arr = json::array();
  for (const CameraRecord& c : cams) {
    json v;
    v["intrinsics"] = detail::mat3_to_json(c.K);
    v["rotation"] = detail::mat3_to_json(c.R);
    v["translation"] = detail::vec3_to_json(c.t);
    v["image_path"] = c.image_path;
    arr.push_back(std::move(v));
  }
  write_json(path, arr);
}

inline std::vector<CameraRecord> load_cameras(const std::filesystem::path& path) {
  const json arr = parse_json(path);
  if (!arr.is_array()) throw IoError("camera file must be a JSON array: " + path.string());
  std::vector<CameraRecord> cams;
  for (const json& v : arr) {
    CameraRecord c;
    c.K = detail::mat3_from_json(v.at("intrinsics"));
    c.R = detail::mat3_from_json(v.at("rotation"));
    c.t = detail::vec3_from_json(v.at("translation"));
    c.image_path = v.at("image_path").get<std::string>();
    cams.push_back(std::move(c));
  }
  return cams;
}

// ---- Matches ----

inline void save_matches(const std::filesystem::path& path,
                         const std::vector<PairMatches>& matches) {
  json arr = json::array();
  for (const PairMatches& m : matches) {
    json e;
    e["image_a"] = m.image_a;
    e["image_b"] = m.image_b;
    json pairs = json::array();
    for (const auto& p : m.pairs)
      pairs.push_back(json::array({p[0], p[1], p[2], p[3]}));
    e["pairs"] = std::move(pairs);
    arr.push_back(std::move(e));
  }
  write_json(path, arr);
}

inline std::vector<PairMatches> load_matches(const std::filesystem::path& path) {
  const json arr = parse_json(path);
  if (!arr.is_array()) throw IoError("matches file must be a JSON array: " + path.string());
  std::vector<PairMatches> out;
  for (const json& e : arr) {
    PairMatches m;
    m.image_a = e.at("image_a").get<int>();
    m.image_b = e.at("image_b").get<int>();
    for (const json& p : e.at("pairs")) {
      if (!p.is_array() || p.size() != 4)
        throw IoError("match pair must have 4 numbers: " + path.string());
      m.pairs.push_back({p[0].get<double>(), p[1].get<double>(),
                         p[2].get<double>(), p[3].get<double>()});
    }
    out.push_back(std::move(m));
  }
  return out;
}

// ---- Deformation graphs ----

inline void save_graph(const std::filesystem::path& path,
                       const DeformationGraph& g) {
  json j;
  j["k"] = g.k;
  json nodes = json::array();
  for (const GraphNode& n : g.nodes) {
    json e;
    e["g"] = detail::vec3_to_json(n.g);
    e["R"] = detail::mat3_to_json(n.R);
    e["t"] = detail::vec3_to_json(n.t);
    nodes.push_back(std::move(e));
  }
  j["nodes"] = std::move(nodes);
  j["neighbors"] = g.neighbors;
  write_json(path, j);
}

inline DeformationGraph load_graph(const std::filesystem::path& path) {
  const json j = parse_json(path);
  DeformationGraph g;
  g.k = j.at("k").get<int>();
  for (const json& e : j.at("nodes")) {
    GraphNode n;
    n.g = detail::vec3_from_json(e.at("g"));
    n.R = detail::mat3_from_json(e.at("R"));
    n.t = detail::vec3_from_json(e.at("t"));
    g.nodes.push_back(std::move(n));
  }
  g.neighbors = j.at("neighbors").get<std::vector<std::vector<int>>>();
  if (g.neighbors.size() != g.nodes.size())
    throw IoError("graph neighbors/nodes mismatch: " + path.string());
  return g;
}

// ---- Pipeline config ----

// Known config keys; flags win over the file in the CLI layer.
inline void apply_config_json(const json& j, PipelineConfig& cfg) {
  if (j.contains("w_sparse")) cfg.weights.w_sparse = j["w_sparse"].get<double>();
  if (j.contains("w_dense")) cfg.weights.w_dense = j["w_dense"].get<double>();
  if (j.contains("w_reg")) cfg.weights.w_reg = j["w_reg"].get<double>();
  if (j.contains("d_max")) cfg.d_max = j["d_max"].get<double>();
  if (j.contains("rho_max")) cfg.rho_max = j["rho_max"].get<double>();
  if (j.contains("tau")) cfg.tau = j["tau"].get<double>();
  if (j.contains("k")) cfg.k = j["k"].get<int>();
  if (j.contains("num_nodes")) cfg.num_nodes = j["num_nodes"].get<int>();
  if (j.contains("pyramid_levels")) cfg.pyramid_levels = j["pyramid_levels"].get<int>();
  if (j.contains("assoc_iters_N")) cfg.assoc_iters = j["assoc_iters_N"].get<int>();
  if (j.contains("pm_iterations")) cfg.pm_iterations = j["pm_iterations"].get<int>();
  if (j.contains("min_consistent_views"))
    cfg.min_consistent_views = j["min_consistent_views"].get<int>();
  if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
}

inline json config_to_json(const PipelineConfig& cfg) {
  json j;
  j["w_sparse"] = cfg.weights.w_sparse;
  j["w_dense"] = cfg.weights.w_dense;
  j["w_reg"] = cfg.weights.w_reg;
  j["d_max"] = cfg.d_max;
  j["rho_max"] = cfg.rho_max;
  j["tau"] = cfg.tau;
  j["k"] = cfg.k;
  j["num_nodes"] = cfg.num_nodes;
  j["pyramid_levels"] = cfg.pyramid_levels;
  j["assoc_iters_N"] = cfg.assoc_iters;
  j["pm_iterations"] = cfg.pm_iterations;
  j["min_consistent_views"] = cfg.min_consistent_views;
  j["seed"] = cfg.seed;
  return j;
}

}  // namespace nrmvs
