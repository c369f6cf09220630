#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "mflow/nnblocks.hpp"

namespace mflow::models {

using nn::Context;
using tensor::Graph;
using tensor::Mode;
using tensor::Parameter;
using tensor::Tensor;
using tensor::Var;

enum class Arch : std::uint8_t { unet = 0, tnet = 1, attn_unet = 2 };

std::string_view arch_name(Arch a);
// Throws InvalidSpec for unknown names.
Arch parse_arch(std::string_view name);

struct ModelSpec {
  Arch arch = Arch::attn_unet;
  int in_channels = 1;
  int out_channels = 1;  // 1 = magnitude, 2 = (u, v)
  int base_width = 64;
  std::uint64_t seed = 0;
  // Number of stride-2 stages; 0 selects the full architecture (4 for the
  // U-Net, 7 for the others). Reduced depths serve small test inputs.
  int depth = 0;

  void validate() const;
  int resolved_depth() const;
  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

template <typename T>
class Network {
 public:
  virtual ~Network() = default;
  virtual Var<T> forward(Var<T> x, const Context& ctx) const = 0;
};

template <typename T>
class Model {
 public:
  explicit Model(const ModelSpec& spec);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelSpec& spec() const { return spec_; }

  // x: N x in_channels x H x W with H, W divisible by 2^depth.
  // Output N x out_channels x H x W, no final activation.
  Var<T> forward(Var<T> x, const Context& ctx) const;

  // Eval-mode forward on a plain tensor.
  Tensor<T> predict(const Tensor<T>& x) const;

  std::vector<Parameter<T>*> parameters() const { return store_->all(); }
  std::vector<Parameter<T>*> trainable() const;

 private:
  ModelSpec spec_;
  std::unique_ptr<nn::ParamStore<T>> store_;
  std::unique_ptr<Network<T>> net_;
};

// Element count over trainable parameters.
template <typename T>
std::size_t param_count(const Model<T>& model);

// Checkpoint: "MFCK", u32 version, u32 arch id, spec fields, u32 parameter
// count, then per parameter: u16 name length, name, u8 trainable, 4 x u32
// shape, little-endian float32 values. All entries, including batch-norm
// running statistics, in build order.
template <typename T>
void save(const Model<T>& model, const std::filesystem::path& path);

template <typename T>
Model<T> load(const std::filesystem::path& path);

// Loads into an existing model; CorruptCheckpoint if the stored spec differs.
template <typename T>
void load_into(Model<T>& model, const std::filesystem::path& path);

// Copies parameter values between models of the same spec.
template <typename T>
void copy_parameters(const Model<T>& from, Model<T>& to);

}  // namespace mflow::models
