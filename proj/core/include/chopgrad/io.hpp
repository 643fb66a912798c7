#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "chopgrad/decoder.hpp"
#include "chopgrad/scheduler.hpp"
#include "chopgrad/training.hpp"

namespace chopgrad {

/// Flat little-endian float64 array.
void write_f64(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_f64(const std::filesystem::path& path);

/// Every artifact is `<stem>.bin` plus a `<stem>.json` manifest listing the
/// kind, the tensor names and shapes in file order, and the element count.
void save_params(const std::filesystem::path& stem, const DecoderParams& params);
DecoderParams load_params(const std::filesystem::path& stem);

void save_video(const std::filesystem::path& stem, const Tensor& video, std::uint64_t seed);
Tensor load_video(const std::filesystem::path& stem, std::uint64_t* seed = nullptr);

void save_grad_result(const std::filesystem::path& stem, const GradResult& grads);
GradResult load_grad_result(const std::filesystem::path& stem);

void save_checkpoint(const std::filesystem::path& stem, const ToyBackbone& backbone, const DecoderParams& decoder,
                     std::size_t step);
struct Checkpoint {
  ToyBackbone backbone;
  DecoderParams decoder;
  std::size_t step = 0;
};
Checkpoint load_checkpoint(const std::filesystem::path& stem);

}  // namespace chopgrad
