#include "chopgrad/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json_convert.hpp"
#include "chopgrad/report.hpp"

namespace chopgrad {

using detail::json;

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

std::uint64_t swap_if_big(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) return __builtin_bswap64(v);
  return v;
}

std::filesystem::path with_ext(const std::filesystem::path& stem, const char* ext) {
  return std::filesystem::path(stem.string() + ext);
}

json read_manifest(const std::filesystem::path& stem, const std::string& kind) {
  const auto path = with_ext(stem, ".json");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open manifest " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error("invalid manifest " + path.string() + ": " + e.what());
  }
  if (j.value("kind", "") != kind) throw Error(path.string() + " is not a " + kind + " manifest");
  return j;
}

struct Entry {
  std::string name;
  Shape shape;
};

/// Writes the tensors back to back and a manifest describing them.
void save_tensors(const std::filesystem::path& stem, const std::string& kind, const std::vector<Entry>& entries,
                  std::span<const double> flat, json extra) {
  json list = json::array();
  std::size_t count = 0;
  for (const Entry& e : entries) {
    list.push_back({{"name", e.name}, {"shape", e.shape}});
    count += element_count(e.shape);
  }
  if (count != flat.size()) throw Error("manifest describes " + std::to_string(count) + " values, got " +
                                        std::to_string(flat.size()));
  extra["kind"] = kind;
  extra["dtype"] = "float64";
  extra["byte_order"] = "little";
  extra["count"] = count;
  extra["tensors"] = list;
  extra["data"] = with_ext(stem, ".bin").filename().string();
  write_f64(with_ext(stem, ".bin"), flat);
  write_text(with_ext(stem, ".json"), extra.dump(2) + "\n");
}

/// Reads the data file and splits it by the manifest's tensor shapes.
std::vector<Tensor> load_tensors(const std::filesystem::path& stem, const json& manifest) {
  const std::vector<double> flat = read_f64(with_ext(stem, ".bin"));
  if (flat.size() != manifest.at("count").get<std::size_t>()) {
    throw Error(with_ext(stem, ".bin").string() + " holds " + std::to_string(flat.size()) +
                " values, manifest says " + std::to_string(manifest.at("count").get<std::size_t>()));
  }
  std::vector<Tensor> out;
  std::size_t k = 0;
  for (const json& e : manifest.at("tensors")) {
    const Shape shape = e.at("shape").get<Shape>();
    const std::size_t n = element_count(shape);
    if (k + n > flat.size()) throw Error("manifest shapes exceed data in " + stem.string());
    out.emplace_back(shape, std::vector<double>(flat.begin() + static_cast<long>(k),
                                                flat.begin() + static_cast<long>(k + n)));
    k += n;
  }
  if (k != flat.size()) throw Error("manifest shapes do not cover data in " + stem.string());
  return out;
}

std::vector<Entry> param_entries(const DecoderParams& p, const std::string& prefix) {
  std::vector<Entry> out;
  for (std::size_t m = 0; m < p.layers.size(); ++m) {
    out.push_back({prefix + "layer" + std::to_string(m) + ".kernel", p.layers[m].kernel.shape()});
    out.push_back({prefix + "layer" + std::to_string(m) + ".bias", p.layers[m].bias.shape()});
  }
  out.push_back({prefix + "expand.weight", p.expand_weight.shape()});
  out.push_back({prefix + "expand.bias", p.expand_bias.shape()});
  return out;
}

DecoderParams params_from(const DecoderConfig& config, std::span<const Tensor> ts) {
  DecoderParams p = init_params(config);
  const std::vector<Tensor*> dst = p.tensors();
  if (dst.size() != ts.size()) throw Error("parameter tensor count does not match the decoder config");
  for (std::size_t k = 0; k < dst.size(); ++k) {
    if (dst[k]->shape() != ts[k].shape()) {
      throw ShapeError("parameter " + std::to_string(k) + " has shape " + to_string(ts[k].shape()) + ", config wants " +
                       to_string(dst[k]->shape()));
    }
    *dst[k] = ts[k];
  }
  return p;
}

}  // namespace

void write_f64(const std::filesystem::path& path, std::span<const double> values) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (double v : values) {
    const std::uint64_t bits = swap_if_big(std::bit_cast<std::uint64_t>(v));
    out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
  }
  if (!out) throw Error("write failed for " + path.string());
}

std::vector<double> read_f64(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  if (bytes.size() % 8 != 0) throw Error(path.string() + " is not a whole number of float64 values");
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t k = 0; k < out.size(); ++k) {
    std::uint64_t bits;
    std::memcpy(&bits, bytes.data() + 8 * k, 8);
    out[k] = std::bit_cast<double>(swap_if_big(bits));
  }
  return out;
}

void save_params(const std::filesystem::path& stem, const DecoderParams& params) {
  save_tensors(stem, "decoder_params", param_entries(params, ""), params.flatten(),
               json{{"decoder", detail::to_json(params.config)}});
}

DecoderParams load_params(const std::filesystem::path& stem) {
  const json m = read_manifest(stem, "decoder_params");
  const DecoderConfig config = detail::decoder_from_json(m.at("decoder"), "decoder");
  return params_from(config, load_tensors(stem, m));
}

void save_video(const std::filesystem::path& stem, const Tensor& video, std::uint64_t seed) {
  save_tensors(stem, "video", {{"frames", video.shape()}}, video.values(), json{{"seed", seed}});
}

Tensor load_video(const std::filesystem::path& stem, std::uint64_t* seed) {
  const json m = read_manifest(stem, "video");
  std::vector<Tensor> ts = load_tensors(stem, m);
  if (ts.size() != 1) throw Error("video manifest must list one tensor");
  if (seed) *seed = m.at("seed").get<std::uint64_t>();
  return std::move(ts.front());
}

void save_grad_result(const std::filesystem::path& stem, const GradResult& grads) {
  std::vector<Entry> entries;
  std::vector<double> flat;
  for (std::size_t i = 0; i < grads.latent_grads.size(); ++i) {
    entries.push_back({"latent" + std::to_string(i), grads.latent_grads[i].shape()});
    flat.insert(flat.end(), grads.latent_grads[i].values().begin(), grads.latent_grads[i].values().end());
  }
  entries.push_back({"params", {grads.param_grad.size()}});
  flat.insert(flat.end(), grads.param_grad.begin(), grads.param_grad.end());
  save_tensors(stem, "grad_result", entries, flat,
               json{{"loss", grads.loss},
                    {"backward_steps", grads.backward_steps}});
}

GradResult load_grad_result(const std::filesystem::path& stem) {
  const json m = read_manifest(stem, "grad_result");
  std::vector<Tensor> ts = load_tensors(stem, m);
  if (ts.empty()) throw Error("grad_result manifest lists no tensors");
  GradResult g;
  g.param_grad.assign(ts.back().values().begin(), ts.back().values().end());
  ts.pop_back();
  g.latent_grads = std::move(ts);
  g.loss = m.at("loss").get<double>();
  g.backward_steps = m.at("backward_steps").get<std::size_t>();
  return g;
}

void save_checkpoint(const std::filesystem::path& stem, const ToyBackbone& backbone, const DecoderParams& decoder,
                     std::size_t step) {
  std::vector<Entry> entries{{"backbone.w1", backbone.w1.shape()},
                             {"backbone.b1", backbone.b1.shape()},
                             {"backbone.w2", backbone.w2.shape()},
                             {"backbone.b2", backbone.b2.shape()}};
  for (Entry& e : param_entries(decoder, "decoder.")) entries.push_back(std::move(e));
  std::vector<double> flat = backbone.flatten();
  const std::vector<double> dec = decoder.flatten();
  flat.insert(flat.end(), dec.begin(), dec.end());
  save_tensors(stem, "checkpoint", entries, flat,
               json{{"step", step},
                    {"backbone", {{"channels", backbone.channels}, {"hidden", backbone.hidden}}},
                    {"decoder", detail::to_json(decoder.config)}});
}

Checkpoint load_checkpoint(const std::filesystem::path& stem) {
  const json m = read_manifest(stem, "checkpoint");
  std::vector<Tensor> ts = load_tensors(stem, m);
  if (ts.size() < 4) throw Error("checkpoint manifest lists too few tensors");
  Checkpoint c;
  c.step = m.at("step").get<std::size_t>();
  c.backbone.channels = m.at("backbone").at("channels").get<std::size_t>();
  c.backbone.hidden = m.at("backbone").at("hidden").get<std::size_t>();
  c.backbone.w1 = ts[0];
  c.backbone.b1 = ts[1];
  c.backbone.w2 = ts[2];
  c.backbone.b2 = ts[3];
  const DecoderConfig config = detail::decoder_from_json(m.at("decoder"), "decoder");
  c.decoder = params_from(config, std::span<const Tensor>(ts).subspan(4));
  return c;
}

}  // namespace chopgrad
