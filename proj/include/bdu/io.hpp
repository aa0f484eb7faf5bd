// File formats: NPY v1.0 arrays, 8-bit PGM previews, content hashes and the
// model checkpoint directory (one NPY per tensor plus a JSON manifest).
#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "bdu/likelihood.hpp"

namespace bdu {

namespace fs = std::filesystem;
using json = nlohmann::json;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& p, const std::string& bytes) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + p.string());
}

inline std::string hex64(std::uint64_t h) {
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << h;
  return ss.str();
}

inline std::string content_hash(const std::string& bytes) { return "fnv1a64:" + hex64(fnv1a64(bytes)); }
inline std::string file_hash(const fs::path& p) { return content_hash(read_file(p)); }

// ---- NPY -------------------------------------------------------------------

namespace detail {

inline std::string npy_header(const std::string& descr, const Shape& shape) {
  std::string dims;
  for (std::size_t i = 0; i < shape.size(); ++i) dims += std::to_string(shape[i]) + (shape.size() == 1 ? "," : i + 1 < shape.size() ? ", " : "");
  std::string dict = "{'descr': '" + descr + "', 'fortran_order': False, 'shape': (" + dims + "), }";
  const std::size_t unpadded = 10 + dict.size() + 1;
  dict.append((64 - unpadded % 64) % 64, ' ');
  dict += '\n';
  std::string out("\x93NUMPY\x01\x00", 8);
  const auto len = static_cast<std::uint16_t>(dict.size());
  out += static_cast<char>(len & 0xff);
  out += static_cast<char>(len >> 8);
  return out + dict;
}

struct NpyHeader {
  std::string descr;
  Shape shape;
  std::size_t data_offset = 0;
};

inline NpyHeader parse_npy_header(const std::string& bytes, const std::string& where) {
  if (bytes.size() < 10 || bytes.compare(0, 6, "\x93NUMPY") != 0) throw IoError(where + ": not an NPY file");
  const int major = static_cast<unsigned char>(bytes[6]);
  std::size_t hlen, off;
  if (major == 1) {
    hlen = static_cast<unsigned char>(bytes[8]) | (static_cast<std::size_t>(static_cast<unsigned char>(bytes[9])) << 8);
    off = 10;
  } else if (major == 2 || major == 3) {
    if (bytes.size() < 12) throw IoError(where + ": truncated NPY header");
    hlen = 0;
    for (int i = 3; i >= 0; --i) hlen = (hlen << 8) | static_cast<unsigned char>(bytes[8 + static_cast<std::size_t>(i)]);
    off = 12;
  } else {
    throw IoError(where + ": unsupported NPY version");
  }
  if (bytes.size() < off + hlen) throw IoError(where + ": truncated NPY header");
  const std::string h = bytes.substr(off, hlen);
  NpyHeader out;
  out.data_offset = off + hlen;
  const auto d = h.find("'descr'");
  const auto q1 = h.find('\'', h.find(':', d) + 1);
  const auto q2 = h.find('\'', q1 + 1);
  if (d == std::string::npos || q1 == std::string::npos || q2 == std::string::npos)
    throw IoError(where + ": NPY header lacks descr");
  out.descr = h.substr(q1 + 1, q2 - q1 - 1);
  if (h.find("'fortran_order': True") != std::string::npos) throw IoError(where + ": fortran order unsupported");
  const auto s0 = h.find('(', h.find("'shape'"));
  const auto s1 = h.find(')', s0);
  if (s0 == std::string::npos || s1 == std::string::npos) throw IoError(where + ": NPY header lacks shape");
  std::stringstream ss(h.substr(s0 + 1, s1 - s0 - 1));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
    if (!item.empty()) out.shape.push_back(static_cast<std::size_t>(std::stoull(item)));
  }
  return out;
}

}  // namespace detail

// Little-endian float64; scalars (rank 0) are not produced by this library.
inline std::string npy_bytes(const Tensor& t) {
  std::string out = detail::npy_header("<f8", t.shape());
  const std::size_t at = out.size();
  out.resize(at + t.size() * sizeof(double));
  std::memcpy(out.data() + at, t.data(), t.size() * sizeof(double));
  return out;
}

inline void save_npy(const fs::path& p, const Tensor& t) { write_file(p, npy_bytes(t)); }

inline std::string npy_bytes_u8(const std::vector<std::uint8_t>& v, const Shape& shape) {
  if (shape_numel(shape) != v.size()) throw DimensionError("npy u8: shape does not match data");
  std::string out = detail::npy_header("|u1", shape);
  out.append(reinterpret_cast<const char*>(v.data()), v.size());
  return out;
}

inline Tensor load_npy(const fs::path& p) {
  const std::string bytes = read_file(p);
  const auto h = detail::parse_npy_header(bytes, p.string());
  const std::size_t n = shape_numel(h.shape);
  Tensor t(h.shape.empty() ? Shape{1} : h.shape);
  if (h.descr == "<f8") {
    if (bytes.size() < h.data_offset + n * 8) throw IoError(p.string() + ": truncated data");
    std::memcpy(t.data(), bytes.data() + h.data_offset, n * 8);
  } else if (h.descr == "<f4") {
    if (bytes.size() < h.data_offset + n * 4) throw IoError(p.string() + ": truncated data");
    for (std::size_t i = 0; i < n; ++i) {
      float f;
      std::memcpy(&f, bytes.data() + h.data_offset + 4 * i, 4);
      t[i] = f;
    }
  } else if (h.descr == "|u1") {
    if (bytes.size() < h.data_offset + n) throw IoError(p.string() + ": truncated data");
    for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<unsigned char>(bytes[h.data_offset + i]);
  } else {
    throw IoError(p.string() + ": unsupported dtype " + h.descr);
  }
  return t;
}

// ---- PGM -------------------------------------------------------------------

// 8-bit binary PGM of an image (display magnitude for 2-channel images),
// linearly mapped from [lo, hi] (defaults to the data range) onto [0, 255].
inline std::string pgm_bytes(const Tensor& img, double lo = NAN, double hi = NAN) {
  const Tensor d = display_image(img);
  const auto [mn, mx] = std::minmax_element(d.vec().begin(), d.vec().end());
  if (std::isnan(lo)) lo = *mn;
  if (std::isnan(hi)) hi = *mx;
  const double span = hi > lo ? hi - lo : 1.0;
  std::string out = "P5\n" + std::to_string(d.dim(1)) + " " + std::to_string(d.dim(0)) + "\n255\n";
  for (double v : d.vec()) {
    const double s = std::clamp((v - lo) / span, 0.0, 1.0);
    out += static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * s)));
  }
  return out;
}

inline void save_pgm(const fs::path& p, const Tensor& img, double lo = NAN, double hi = NAN) {
  write_file(p, pgm_bytes(img, lo, hi));
}

// ---- descriptors and configs -------------------------------------------------

inline json operator_to_json(const OperatorDesc& d) {
  if (const auto* f = std::get_if<FourierMaskDesc>(&d))
    return {{"kind", "fourier"},        {"height", f->height},
            {"width", f->width},        {"observed_fraction", f->observed_fraction},
            {"center_fraction", f->center_fraction}, {"seed", f->seed}};
  if (const auto* r = std::get_if<RadonDesc>(&d))
    return {{"kind", "radon"}, {"size", r->size}, {"n_views", r->n_views}, {"n_detectors", r->n_detectors}};
  if (const auto* s = std::get_if<ScalarDesc>(&d)) return {{"kind", "scalar"}, {"a", s->a}};
  const auto& m = std::get<DenseDesc>(d);
  return {{"kind", "dense"}, {"input_shape", m.input_shape}, {"rows", m.rows}, {"matrix", m.matrix}};
}

inline OperatorDesc operator_from_json(const json& j) {
  const std::string kind = j.at("kind");
  if (kind == "fourier") {
    FourierMaskDesc f;
    f.height = j.at("height");
    f.width = j.at("width");
    f.observed_fraction = j.at("observed_fraction");
    f.center_fraction = j.value("center_fraction", f.center_fraction);
    f.seed = j.value("seed", std::uint64_t{0});
    return f;
  }
  if (kind == "radon") {
    RadonDesc r;
    r.size = j.at("size");
    r.n_views = j.at("n_views");
    r.n_detectors = j.value("n_detectors", std::size_t{0});
    return r;
  }
  if (kind == "scalar") return ScalarDesc{j.at("a").get<double>()};
  if (kind == "dense")
    return DenseDesc{j.at("input_shape").get<Shape>(), j.at("rows").get<std::size_t>(),
                     j.at("matrix").get<std::vector<double>>()};
  throw ConfigError("unknown operator kind '" + kind + "'");
}

inline json model_config_to_json(const ModelConfig& c) {
  return {{"operator", operator_to_json(c.op)},
          {"unrolled",
           {{"iterations", c.f.iterations},
            {"alpha_init", c.f.alpha_init},
            {"width", c.f.width},
            {"leaky_slope", c.f.leaky_slope},
            {"batch_norm", c.f.batch_norm},
            {"mlp_hidden_layers", c.f.mlp_hidden_layers}}},
          {"variance_net",
           {{"base_channels", c.var.base_channels}, {"depth", c.var.depth}, {"mlp_hidden_layers", c.var.mlp_hidden_layers}}},
          {"dropout_rate", c.dropout_rate},
          {"covariance", c.covariance.learned ? json{{"mode", "learned_diag"}}
                                              : json{{"mode", "fixed_scalar"}, {"value", c.covariance.fixed_value}}},
          {"init_seed", c.init_seed}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.op = operator_from_json(j.at("operator"));
  if (j.contains("unrolled")) {
    const auto& u = j["unrolled"];
    c.f.iterations = u.value("iterations", c.f.iterations);
    c.f.alpha_init = u.value("alpha_init", c.f.alpha_init);
    c.f.width = u.value("width", c.f.width);
    c.f.leaky_slope = u.value("leaky_slope", c.f.leaky_slope);
    c.f.batch_norm = u.value("batch_norm", c.f.batch_norm);
    c.f.mlp_hidden_layers = u.value("mlp_hidden_layers", c.f.mlp_hidden_layers);
  }
  if (j.contains("variance_net")) {
    const auto& v = j["variance_net"];
    c.var.base_channels = v.value("base_channels", c.var.base_channels);
    c.var.depth = v.value("depth", c.var.depth);
    c.var.mlp_hidden_layers = v.value("mlp_hidden_layers", c.var.mlp_hidden_layers);
  }
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
  if (j.contains("covariance")) {
    const std::string mode = j["covariance"].at("mode");
    if (mode == "learned_diag")
      c.covariance = CovarianceMode::learned_diag();
    else if (mode == "fixed_scalar")
      c.covariance = CovarianceMode::fixed_scalar(j["covariance"].at("value").get<double>());
    else
      throw ConfigError("unknown covariance mode '" + mode + "'");
  }
  c.init_seed = j.value("init_seed", c.init_seed);
  return c;
}

// ---- checkpoints -------------------------------------------------------------

inline std::string tensor_file_name(const std::string& name) {
  std::string f = name;
  std::replace(f.begin(), f.end(), '/', '_');
  return f + ".npy";
}

// Writes every model tensor plus manifest.json holding the model config, the
// current step size and a content hash per file.
inline void save_checkpoint(const fs::path& dir, LikelihoodModel& model, const json& extra = json::object()) {
  fs::create_directories(dir);
  json files = json::object();
  for (auto& [name, t] : model.state()) {
    const std::string bytes = npy_bytes(*t);
    const std::string file = tensor_file_name(name);
    write_file(dir / file, bytes);
    files[name] = {{"file", file}, {"shape", t->shape()}, {"hash", content_hash(bytes)}};
  }
  json manifest = {{"format", "bdu-checkpoint/1"},
                   {"model", model_config_to_json(model.config())},
                   {"alpha", model.alpha()},
                   {"dropout_rate", model.dropout_rate()},
                   {"tensors", files},
                   {"extra", extra}};
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline LikelihoodModel load_checkpoint(const fs::path& dir) {
  const json manifest = json::parse(read_file(dir / "manifest.json"));
  LikelihoodModel model(model_config_from_json(manifest.at("model")));
  const json& files = manifest.at("tensors");
  for (auto& [name, t] : model.state()) {
    if (!files.contains(name)) throw StateError("checkpoint lacks tensor " + name);
    const std::string bytes = read_file(dir / files[name].at("file").get<std::string>());
    if (content_hash(bytes) != files[name].at("hash")) throw StateError("checkpoint tensor " + name + " fails its hash");
    Tensor v = load_npy(dir / files[name].at("file").get<std::string>());
    if (v.shape() != t->shape()) throw StateError("checkpoint tensor " + name + " has shape " + shape_str(v.shape()));
    *t = std::move(v);
  }
  return model;
}

}  // namespace bdu
