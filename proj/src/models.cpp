#include "mflow/models.hpp"

#include <array>
#include <fstream>

#include "binio.hpp"
#include "mflow/error.hpp"

namespace mflow::models {

namespace ts = mflow::tensor;
using nn::ParamStore;

namespace {

[[noreturn]] void invalid(const std::string& what) { throw Error(ErrorKind::InvalidSpec, what); }

template <typename T>
void check_input(Var<T> x, const ModelSpec& spec, int in_channels) {
  const auto s = x.shape();
  const int unit = 1 << spec.resolved_depth();
  if (s.c != in_channels || s.h % unit != 0 || s.w % unit != 0 || s.h < unit || s.w < unit) {
    throw Error(ErrorKind::ShapeMismatch, std::string(arch_name(spec.arch)) + " depth " +
                                              std::to_string(spec.resolved_depth()) + " cannot take input " + s.str());
  }
}

// Depth-d U-Net: pooled down blocks, a bottleneck, up blocks over the
// first d-1 skips, then a transposed conv back to full size and a 1x1 head.
template <typename T>
class UNet final : public Network<T> {
 public:
  UNet(ParamStore<T>& ps, const ModelSpec& spec) : spec_(spec) {
    const int d = spec.resolved_depth();
    int cin = spec.in_channels;
    for (int i = 0; i < d; ++i) {
      const int w = spec.base_width << i;
      down_.emplace_back(ps, "down" + std::to_string(i), cin, w);
      cin = w;
    }
    bottleneck_ = nn::Bottleneck<T>(ps, "bottleneck", cin, 2 * cin);
    cin *= 2;
    for (int i = d - 2; i >= 0; --i) {
      const int w = spec.base_width << i;
      up_.emplace_back(ps, "up" + std::to_string(i), cin, w, w, 2);
      cin = w;
    }
    final_up_ = nn::ConvTranspose2d<T>(ps, "final_up", cin, cin, 2, 2, 0);
    head_ = nn::Conv2d<T>(ps, "head", cin, spec.out_channels, 1, 1, 0);
  }

  Var<T> forward(Var<T> x, const Context& ctx) const override {
    check_input(x, spec_, spec_.in_channels);
    std::vector<Var<T>> skips;
    for (const auto& block : down_) {
      x = block(x, ctx.mode);
      skips.push_back(x);
    }
    x = bottleneck_(x, ctx.mode);
    for (std::size_t j = 0; j < up_.size(); ++j) x = up_[j](x, skips[skips.size() - 2 - j], ctx.mode);
    return head_(final_up_(x));
  }

 private:
  ModelSpec spec_;
  std::vector<nn::DownBlock<T>> down_;
  nn::Bottleneck<T> bottleneck_;
  std::vector<nn::UpBlock<T>> up_;
  nn::ConvTranspose2d<T> final_up_;
  nn::Conv2d<T> head_;
};

// Stride-2 conv encoder (leaky ReLU, BN), CAM on the deepest skip, SAM on
// every other skip, transposed-conv decoder (ReLU, BN).
template <typename T>
class AttnUNet final : public Network<T> {
 public:
  static constexpr std::array<int, 7> kWidths = {64, 128, 256, 512, 512, 512, 512};

  AttnUNet(ParamStore<T>& ps, const ModelSpec& spec) : spec_(spec) {
    const int d = spec.resolved_depth();
    std::vector<int> w(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) w[i] = kWidths[i] * spec.base_width / 64;
    int cin = spec.in_channels;
    for (int i = 0; i < d; ++i) {
      const bool last = i == d - 1;
      enc_conv_.emplace_back(ps, "enc" + std::to_string(i) + ".conv", cin, w[i], last ? 2 : 4, 2, last ? 0 : 1);
      enc_bn_.emplace_back(ps, "enc" + std::to_string(i) + ".bn", w[i]);
      cin = w[i];
    }
    cam_ = nn::CAM<T>(ps, "cam", w[d - 1]);
    for (int i = 0; i < d - 1; ++i) sam_.emplace_back(ps, "sam" + std::to_string(i));
    for (int j = d - 1; j >= 1; --j) {
      const bool deepest = j == d - 1;
      const int in = deepest ? w[j] : 2 * w[j];
      dec_conv_.emplace_back(ps, "dec" + std::to_string(j) + ".up", in, w[j - 1], deepest ? 2 : 4, 2, deepest ? 0 : 1);
      dec_bn_.emplace_back(ps, "dec" + std::to_string(j) + ".bn", w[j - 1]);
    }
    const int in = d == 1 ? w[0] : 2 * w[0];
    head_ = nn::ConvTranspose2d<T>(ps, "dec0.up", in, spec.out_channels, d == 1 ? 2 : 4, 2, d == 1 ? 0 : 1);
  }

  Var<T> forward(Var<T> x, const Context& ctx) const override {
    check_input(x, spec_, spec_.in_channels);
    std::vector<Var<T>> skips;
    for (std::size_t i = 0; i < enc_conv_.size(); ++i) {
      x = enc_bn_[i](ts::leaky_relu(enc_conv_[i](x), 0.2), ctx.mode);
      skips.push_back(x);
    }
    x = cam_(x);
    for (std::size_t j = 0; j < dec_conv_.size(); ++j) {
      const std::size_t level = skips.size() - 2 - j;
      const Var<T> up = dec_bn_[j](ts::relu(dec_conv_[j](x)), ctx.mode);
      x = ts::concat_channels(up, sam_[level](skips[level]));
    }
    return head_(x);
  }

 private:
  ModelSpec spec_;
  std::vector<nn::Conv2d<T>> enc_conv_;
  std::vector<nn::BatchNorm2d<T>> enc_bn_;
  nn::CAM<T> cam_;
  std::vector<nn::SAM<T>> sam_;
  std::vector<nn::ConvTranspose2d<T>> dec_conv_;
  std::vector<nn::BatchNorm2d<T>> dec_bn_;
  nn::ConvTranspose2d<T> head_;
};

// The fourteen-layer T-Net listing; reduced depths keep the first d encoder
// layers and the last d decoder layers.
template <typename T>
class TNet final : public Network<T> {
 public:
  TNet(ParamStore<T>& ps, const ModelSpec& spec) : spec_(spec) {
    using Act = nn::TNetBlockSpec::Act;
    using S = nn::TNetBlockSpec;
    const std::array<S, 7> enc = {
        S{1, 4, 2, Act::none, false, false, true},  S{2, 4, 2, Act::leaky, true, false, true},
        S{2, 4, 2, Act::leaky, true, false, true},  S{4, 4, 2, Act::leaky, true, false, true},
        S{8, 2, 2, Act::leaky, true, false, true},  S{8, 2, 2, Act::leaky, true, false, true},
        S{8, 2, 2, Act::leaky, false, false, true},
    };
    const std::array<S, 7> dec = {
        S{8, 1, 1, Act::relu, true, true, true}, S{8, 1, 1, Act::relu, true, true, true},
        S{8, 3, 1, Act::relu, true, true, true}, S{4, 3, 1, Act::relu, true, true, true},
        S{2, 3, 1, Act::relu, true, true, true}, S{2, 3, 1, Act::relu, true, true, true},
        S{1, 3, 1, Act::relu, false, true, false},
    };
    const int d = spec.resolved_depth();
    const int b = spec.base_width;
    replicate_ = spec.in_channels == 1;
    int cin = replicate_ ? 3 : spec.in_channels;
    std::vector<int> enc_out;
    for (int i = 0; i < d; ++i) {
      const int cout = enc[i].factor * b;
      enc_.emplace_back(ps, "l" + std::to_string(i + 1), enc[i], cin, cout);
      enc_out.push_back(cout);
      cin = cout;
    }
    for (int j = 0; j < d; ++j) {
      const S& s = dec[7 - d + j];
      if (j > 0) cin += enc_out[d - 1 - j];
      const int cout = j == d - 1 ? spec.out_channels : s.factor * b;
      dec_.emplace_back(ps, "l" + std::to_string(15 - d + j), s, cin, cout);
      cin = cout;
    }
  }

  Var<T> forward(Var<T> x, const Context& ctx) const override {
    check_input(x, spec_, spec_.in_channels);
    if (replicate_) x = ts::concat_channels(ts::concat_channels(x, x), x);
    std::vector<Var<T>> skips;
    for (const auto& block : enc_) {
      x = block(x, ctx);
      skips.push_back(x);
    }
    const std::size_t d = enc_.size();
    for (std::size_t j = 0; j < d; ++j) {
      if (j > 0) x = ts::concat_channels(x, skips[d - 1 - j]);
      x = dec_[j](x, ctx);
    }
    return x;
  }

 private:
  ModelSpec spec_;
  bool replicate_ = false;
  std::vector<nn::TNetBlock<T>> enc_;
  std::vector<nn::TNetBlock<T>> dec_;
};

}  // namespace

std::string_view arch_name(Arch a) {
  switch (a) {
    case Arch::unet: return "unet";
    case Arch::tnet: return "tnet";
    case Arch::attn_unet: return "attn_unet";
  }
  return "unknown";
}

Arch parse_arch(std::string_view name) {
  if (name == "unet") return Arch::unet;
  if (name == "tnet") return Arch::tnet;
  if (name == "attn_unet") return Arch::attn_unet;
  invalid("unknown architecture '" + std::string(name) + "'");
}

void ModelSpec::validate() const {
  if (arch != Arch::unet && arch != Arch::tnet && arch != Arch::attn_unet) invalid("unknown architecture id");
  if (out_channels != 1 && out_channels != 2) invalid("out_channels must be 1 or 2");
  if (in_channels < 1) invalid("in_channels must be positive");
  if (base_width < 4) invalid("base_width must be at least 4");
  const int max_depth = arch == Arch::unet ? 6 : 7;
  if (depth < 0 || depth > max_depth) invalid("depth out of range for " + std::string(arch_name(arch)));
  if (arch == Arch::unet && depth == 1) invalid("the U-Net needs depth >= 2");
}

int ModelSpec::resolved_depth() const {
  if (depth > 0) return depth;
  return arch == Arch::unet ? 4 : 7;
}

template <typename T>
Model<T>::Model(const ModelSpec& spec) : spec_(spec) {
  spec_.validate();
  store_ = std::make_unique<nn::ParamStore<T>>(spec_.seed);
  switch (spec_.arch) {
    case Arch::unet: net_ = std::make_unique<UNet<T>>(*store_, spec_); break;
    case Arch::tnet: net_ = std::make_unique<TNet<T>>(*store_, spec_); break;
    case Arch::attn_unet: net_ = std::make_unique<AttnUNet<T>>(*store_, spec_); break;
  }
}

template <typename T>
Var<T> Model<T>::forward(Var<T> x, const Context& ctx) const {
  return net_->forward(x, ctx);
}

template <typename T>
Tensor<T> Model<T>::predict(const Tensor<T>& x) const {
  Graph<T> g(false);
  const Var<T> y = forward(g.constant(x), Context{Mode::eval, 0});
  return y.value();
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::trainable() const {
  std::vector<Parameter<T>*> out;
  for (auto* p : store_->all())
    if (p->trainable) out.push_back(p);
  return out;
}

template <typename T>
std::size_t param_count(const Model<T>& model) {
  std::size_t n = 0;
  for (const auto* p : model.trainable()) n += p->value.size();
  return n;
}

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

[[noreturn]] void corrupt(const std::filesystem::path& path, const std::string& what) {
  throw Error(ErrorKind::CorruptCheckpoint, path.string() + ": " + what);
}

ModelSpec read_spec(std::istream& in, const std::filesystem::path& path) {
  std::uint32_t version = 0, arch = 0, cin = 0, cout = 0, base = 0, depth = 0;
  std::uint64_t seed = 0;
  if (!binio::check_magic(in, "MFCK")) corrupt(path, "bad magic");
  if (!binio::get_le(in, version) || version != kCheckpointVersion) corrupt(path, "unsupported version");
  if (!binio::get_le(in, arch) || !binio::get_le(in, cin) || !binio::get_le(in, cout) || !binio::get_le(in, base) ||
      !binio::get_le(in, seed) || !binio::get_le(in, depth)) {
    corrupt(path, "truncated header");
  }
  if (arch > 2) corrupt(path, "unknown architecture id");
  ModelSpec spec;
  spec.arch = static_cast<Arch>(arch);
  spec.in_channels = static_cast<int>(cin);
  spec.out_channels = static_cast<int>(cout);
  spec.base_width = static_cast<int>(base);
  spec.seed = seed;
  spec.depth = static_cast<int>(depth);
  try {
    spec.validate();
  } catch (const Error& e) {
    corrupt(path, e.what());
  }
  return spec;
}

template <typename T>
void read_params(std::istream& in, Model<T>& model, const std::filesystem::path& path) {
  const auto params = model.parameters();
  std::uint32_t count = 0;
  if (!binio::get_le(in, count) || count != params.size()) corrupt(path, "parameter count mismatch");
  std::vector<float> buf;
  for (auto* p : params) {
    std::uint16_t len = 0;
    if (!binio::get_le(in, len)) corrupt(path, "truncated parameter entry");
    std::string name(len, '\0');
    std::uint8_t trainable = 0;
    std::array<std::uint32_t, 4> dims{};
    if (!in.read(name.data(), len) || !binio::get_le(in, trainable)) corrupt(path, "truncated parameter entry");
    for (auto& d : dims)
      if (!binio::get_le(in, d)) corrupt(path, "truncated parameter entry");
    const auto& s = p->value.shape();
    if (name != p->name || dims[0] != static_cast<std::uint32_t>(s.n) || dims[1] != static_cast<std::uint32_t>(s.c) ||
        dims[2] != static_cast<std::uint32_t>(s.h) || dims[3] != static_cast<std::uint32_t>(s.w) ||
        (trainable != 0) != p->trainable) {
      corrupt(path, "parameter '" + name + "' does not match " + p->name + " " + s.str());
    }
    buf.resize(p->value.size());
    if (!binio::get_f32s(in, buf)) corrupt(path, "truncated data for " + name);
    for (std::size_t i = 0; i < buf.size(); ++i) p->value[i] = static_cast<T>(buf[i]);
  }
  if (in.peek() != std::char_traits<char>::eof()) corrupt(path, "trailing bytes");
}

}  // namespace

template <typename T>
void save(const Model<T>& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
  const ModelSpec& s = model.spec();
  binio::put_magic(out, "MFCK");
  binio::put_le(out, kCheckpointVersion);
  binio::put_le(out, static_cast<std::uint32_t>(s.arch));
  binio::put_le(out, static_cast<std::uint32_t>(s.in_channels));
  binio::put_le(out, static_cast<std::uint32_t>(s.out_channels));
  binio::put_le(out, static_cast<std::uint32_t>(s.base_width));
  binio::put_le(out, s.seed);
  binio::put_le(out, static_cast<std::uint32_t>(s.depth));
  const auto params = model.parameters();
  binio::put_le(out, static_cast<std::uint32_t>(params.size()));
  std::vector<float> buf;
  for (const auto* p : params) {
    binio::put_le(out, static_cast<std::uint16_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    binio::put_le(out, static_cast<std::uint8_t>(p->trainable ? 1 : 0));
    const auto& sh = p->value.shape();
    for (int d : {sh.n, sh.c, sh.h, sh.w}) binio::put_le(out, static_cast<std::uint32_t>(d));
    buf.assign(p->value.values().begin(), p->value.values().end());
    binio::put_f32s(out, buf);
  }
  if (!out) throw Error(ErrorKind::IoFailure, "failed writing " + path.string());
}

template <typename T>
Model<T> load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
  Model<T> model(read_spec(in, path));
  read_params(in, model, path);
  return model;
}

template <typename T>
void load_into(Model<T>& model, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
  const ModelSpec spec = read_spec(in, path);
  if (spec.arch != model.spec().arch) corrupt(path, "architecture id mismatch");
  if (!(spec == model.spec())) corrupt(path, "model spec mismatch");
  read_params(in, model, path);
}

template <typename T>
void copy_parameters(const Model<T>& from, Model<T>& to) {
  if (!(from.spec() == to.spec())) throw Error(ErrorKind::InvalidSpec, "copy between different model specs");
  const auto src = from.parameters();
  const auto dst = to.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
}

#define MFLOW_INSTANTIATE(T)                                                  \
  template class Model<T>;                                                    \
  template std::size_t param_count<T>(const Model<T>&);                       \
  template void save<T>(const Model<T>&, const std::filesystem::path&);       \
  template Model<T> load<T>(const std::filesystem::path&);                    \
  template void load_into<T>(Model<T>&, const std::filesystem::path&);        \
  template void copy_parameters<T>(const Model<T>&, Model<T>&);

MFLOW_INSTANTIATE(float)
MFLOW_INSTANTIATE(double)
#undef MFLOW_INSTANTIATE

}  // namespace mflow::models
