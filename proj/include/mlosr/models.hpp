#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <regex>
#include <string>
#include <utility>
#include <vector>

#include "mlosr/binary_io.hpp"
#include "mlosr/error.hpp"
#include "mlosr/ops.hpp"
#include "mlosr/random.hpp"
#include "mlosr/tape.hpp"
#include "mlosr/tensor.hpp"

namespace mlosr {

enum class LayerKind { Conv, ConvTran, FC, ReLU, Tanh };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "Conv";
    case LayerKind::ConvTran: return "ConvTran";
    case LayerKind::FC: return "FC";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::Tanh: return "Tanh";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind;
  std::optional<std::size_t> width;

  bool operator==(const LayerSpec&) const = default;
};

/// A parsed layer chain with every intermediate per-sample shape resolved.
///
/// Shapes exclude the batch dimension: {C, H, W} for images, {D} for flat
/// vectors. `in_shapes[i]` is what layer i consumes after any implicit
/// flatten (image -> FC) or unflatten (flat -> Conv/ConvTran).
struct ArchitectureSpec {
  std::string text;
  Shape input_shape;
  std::vector<LayerSpec> layers;
  std::vector<Shape> in_shapes;
  std::vector<Shape> out_shapes;

  const Shape& output_shape() const { return out_shapes.empty() ? input_shape : out_shapes.back(); }

  /// Last image-shaped activation, if any (what an FC layer flattens).
  std::optional<Shape> last_image_shape() const {
    for (std::size_t i = out_shapes.size(); i-- > 0;)
      if (out_shapes[i].size() == 3) return out_shapes[i];
    return std::nullopt;
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto w = layers[i].width.value_or(0);
      switch (layers[i].kind) {
        case LayerKind::FC: total += shape_volume(in_shapes[i]) * w + w; break;
        case LayerKind::Conv:
        case LayerKind::ConvTran: total += in_shapes[i][0] * w * 9; break;
        default: break;
      }
    }
    return total;
  }
};

/// Parses the '-'-separated layer notation, e.g.
/// "Conv(32)-ReLU-Conv(64)-ReLU-Conv(128)-FC(512)".
///
/// Conv halves the spatial size (3x3, stride 2, padding 1), ConvTran doubles
/// it, FC flattens an image input. A flat input feeding Conv/ConvTran is
/// unflattened to `unflatten_hint`, whose volume must match.
inline ArchitectureSpec parse_architecture(const std::string& text, const Shape& input_shape,
                                           const std::optional<Shape>& unflatten_hint = std::nullopt) {
  if (input_shape.empty() || input_shape.size() == 2 || input_shape.size() > 3) {
    throw ParseError("input shape must be {D} or {C,H,W}, got " + shape_string(input_shape));
  }
  for (std::size_t d : input_shape)
    if (d == 0) throw ParseError("input shape has a zero dimension: " + shape_string(input_shape));

  static const std::regex token_re(R"(^(Conv|ConvTran|FC|ReLU|Tanh)(?:\((\d+)\))?$)");
  ArchitectureSpec spec;
  spec.text = text;
  spec.input_shape = input_shape;
  Shape cur = input_shape;

  std::size_t pos = 0, index = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('-', pos);
    if (end == std::string::npos) end = text.size();
    const std::string tok = text.substr(pos, end - pos);
    const std::string where = "token " + std::to_string(index) + " ('" + tok + "') at offset " + std::to_string(pos);
    std::smatch m;
    if (!std::regex_match(tok, m, token_re)) throw ParseError("unknown layer " + where);

    const std::string name = m[1];
    LayerSpec layer{};
    if (name == "Conv") layer.kind = LayerKind::Conv;
    else if (name == "ConvTran") layer.kind = LayerKind::ConvTran;
    else if (name == "FC") layer.kind = LayerKind::FC;
    else if (name == "ReLU") layer.kind = LayerKind::ReLU;
    else layer.kind = LayerKind::Tanh;

    const bool activation = layer.kind == LayerKind::ReLU || layer.kind == LayerKind::Tanh;
    if (m[2].matched) {
      if (activation) throw ParseError("activation takes no width: " + where);
      const unsigned long long w = std::stoull(m[2].str());
      if (w == 0) throw ParseError("width must be positive: " + where);
      layer.width = static_cast<std::size_t>(w);
    } else if (!activation) {
      throw ParseError("layer requires a width: " + where);
    }

    Shape in = cur;
    if ((layer.kind == LayerKind::Conv || layer.kind == LayerKind::ConvTran) && in.size() == 1) {
      if (!unflatten_hint || shape_volume(*unflatten_hint) != in[0]) {
        throw ParseError("shape nonconformance: flat input of " + std::to_string(in[0]) +
                         " cannot feed " + where +
                         (unflatten_hint ? " (unflatten target " + shape_string(*unflatten_hint) + ")" : ""));
      }
      in = *unflatten_hint;
    }
    Shape out;
    switch (layer.kind) {
      case LayerKind::Conv: out = {*layer.width, (in[1] + 1) / 2, (in[2] + 1) / 2}; break;
      case LayerKind::ConvTran: out = {*layer.width, in[1] * 2, in[2] * 2}; break;
      case LayerKind::FC:
        in = Shape{shape_volume(in)};
        out = {*layer.width};
        break;
      default: out = in; break;
    }
    spec.layers.push_back(layer);
    spec.in_shapes.push_back(in);
    spec.out_shapes.push_back(out);
    cur = out;

    pos = end + 1;
    ++index;
  }
  return spec;
}

/// Layer parameters plus the spec that shapes them.
struct Network {
  ArchitectureSpec spec;
  // params[i] holds layer i's tensors: FC {weight [in x out], bias [out]},
  // Conv {kernels [F x C x 3 x 3]}, ConvTran {kernels [C x F x 3 x 3]}.
  std::vector<std::vector<Tensor>> params;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& layer : params)
      for (const auto& t : layer) n += t.size();
    return n;
  }

  bool operator==(const Network& o) const { return spec.text == o.spec.text && params == o.params; }
};

inline double init_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

/// Uniform fan-based initialization in +-sqrt(6/(fan_in+fan_out)), zero
/// biases, deterministic per seed.
inline Network init_parameters(const ArchitectureSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  Network net{spec, {}};
  auto fill = [&rng](Tensor& t, double bound) {
    for (double& v : t.values()) v = rng.uniform(-bound, bound);
  };
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    std::vector<Tensor> p;
    const Shape& in = spec.in_shapes[i];
    switch (spec.layers[i].kind) {
      case LayerKind::FC: {
        const std::size_t fan_in = in[0], fan_out = *spec.layers[i].width;
        Tensor w(Shape{fan_in, fan_out});
        fill(w, init_bound(fan_in, fan_out));
        p.push_back(std::move(w));
        p.emplace_back(Shape{fan_out}, 0.0);
        break;
      }
      case LayerKind::Conv: {
        const std::size_t c = in[0], f = *spec.layers[i].width;
        Tensor k(Shape{f, c, 3, 3});
        fill(k, init_bound(c * 9, f * 9));
        p.push_back(std::move(k));
        break;
      }
      case LayerKind::ConvTran: {
        const std::size_t c = in[0], f = *spec.layers[i].width;
        Tensor k(Shape{c, f, 3, 3});
        fill(k, init_bound(c * 9, f * 9));
        p.push_back(std::move(k));
        break;
      }
      default: break;
    }
    net.params.push_back(std::move(p));
  }
  return net;
}

/// Result of running a network on a tape: the output and the leaf handle
/// of every parameter, in params order (flattened layer by layer).
struct NetworkTrace {
  Var output;
  std::vector<Var> params;
};

inline Shape with_batch(std::size_t n, const Shape& per_sample) {
  Shape s{n};
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  return s;
}

inline NetworkTrace run_network(Tape& tape, const Network& net, Var input, bool track_params) {
  const ArchitectureSpec& spec = net.spec;
  const Tensor& xv = tape.value(input);
  if (xv.rank() != spec.input_shape.size() + 1 ||
      !std::equal(spec.input_shape.begin(), spec.input_shape.end(), xv.shape().begin() + 1)) {
    throw DimensionError("network '" + spec.text + "' expects per-sample shape " + shape_string(spec.input_shape) +
                         ", got " + shape_string(xv.shape()));
  }
  const std::size_t n = xv.dim(0);
  NetworkTrace trace{input, {}};
  Var cur = input;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Shape want = with_batch(n, spec.in_shapes[i]);
    if (tape.value(cur).shape() != want) cur = reshape(cur, want);
    std::vector<Var> p;
    for (const Tensor& t : net.params[i]) p.push_back(tape.leaf(t, track_params));
    trace.params.insert(trace.params.end(), p.begin(), p.end());
    switch (spec.layers[i].kind) {
      case LayerKind::FC: cur = affine(cur, p[0], p[1]); break;
      case LayerKind::Conv: cur = conv2d(cur, p[0], 2, 1); break;
      case LayerKind::ConvTran: cur = conv_transpose2d(cur, p[0], 2); break;
      case LayerKind::ReLU: cur = relu(cur); break;
      case LayerKind::Tanh: cur = tanh(cur); break;
    }
  }
  trace.output = cur;
  return trace;
}

/// Network strings and input shape for a full model.
struct ModelConfig {
  std::string encoder = "Conv(32)-ReLU-Conv(64)-ReLU-Conv(128)-FC(512)";
  std::string decoder = "FC(8192)-ConvTran(64)-ReLU-ConvTran(32)-ReLU-ConvTran(1)-Tanh";
  std::string classifier = "FC(512)-FC(15)";
  Shape input_shape{1, 64, 64};

  bool operator==(const ModelConfig&) const = default;
};

/// Encoder F, decoder G, classifier C.
///
/// The decoder is absent for classifier-only models. When
/// `recon_encoder` is set the decoder reads from it instead of the shared
/// encoder (separately trained autoencoder baseline).
struct ModelTriplet {
  ModelConfig config;
  Network encoder;
  std::optional<Network> decoder;
  Network classifier;
  std::optional<Network> recon_encoder;
  std::size_t latent_dim = 0;
  std::size_t num_classes = 0;

  bool has_decoder() const { return decoder.has_value(); }
  const Network& reconstruction_encoder() const { return recon_encoder ? *recon_encoder : encoder; }

  bool operator==(const ModelTriplet&) const = default;
};

enum class DecoderLayout { None, Shared, Separate };

struct ModelSpecs {
  ArchitectureSpec encoder, decoder, classifier;
  std::size_t latent_dim, num_classes;
};

/// Parses and cross-checks the three networks of a model.
inline ModelSpecs resolve_model_specs(const ModelConfig& cfg) {
  ArchitectureSpec enc = parse_architecture(cfg.encoder, cfg.input_shape);
  if (enc.output_shape().size() != 1) {
    throw ParseError("encoder '" + cfg.encoder + "' must end in a flat latent (FC) layer");
  }
  const std::size_t latent = enc.output_shape()[0];
  ArchitectureSpec dec = parse_architecture(cfg.decoder, Shape{latent}, enc.last_image_shape());
  if (dec.output_shape() != cfg.input_shape) {
    throw ParseError("decoder '" + cfg.decoder + "' produces " + shape_string(dec.output_shape()) +
                     " but the input shape is " + shape_string(cfg.input_shape));
  }
  ArchitectureSpec cls = parse_architecture(cfg.classifier, Shape{latent});
  if (cls.output_shape().size() != 1) throw ParseError("classifier must end in an FC layer");
  const std::size_t k = cls.output_shape()[0];
  return ModelSpecs{std::move(enc), std::move(dec), std::move(cls), latent, k};
}

inline ModelTriplet build_model(const ModelConfig& cfg, std::uint64_t seed,
                                DecoderLayout layout = DecoderLayout::Shared) {
  ModelSpecs specs = resolve_model_specs(cfg);
  ModelTriplet m;
  m.config = cfg;
  m.latent_dim = specs.latent_dim;
  m.num_classes = specs.num_classes;
  m.encoder = init_parameters(specs.encoder, mix_seed(seed, 0));
  m.classifier = init_parameters(specs.classifier, mix_seed(seed, 2));
  if (layout != DecoderLayout::None) m.decoder = init_parameters(specs.decoder, mix_seed(seed, 1));
  if (layout == DecoderLayout::Separate) m.recon_encoder = init_parameters(specs.encoder, mix_seed(seed, 3));
  return m;
}

namespace detail {

inline Tensor run_inference(const Network& net, const Tensor& x) {
  Tape tape;
  NetworkTrace tr = run_network(tape, net, tape.leaf(x), false);
  return tape.value(tr.output);
}

inline Tensor row_softmax(const Tensor& logits) {
  Tape tape;
  return tape.value(softmax(tape.leaf(logits)));
}

}  // namespace detail

/// z = F(X)
inline Tensor forward_encoder(const ModelTriplet& m, const Tensor& x) { return detail::run_inference(m.encoder, x); }

/// X~ = G(z). Output has the model's input image shape, values in (-1, 1)
/// when the decoder ends in Tanh.
inline Tensor forward_decoder(const ModelTriplet& m, const Tensor& z) {
  if (!m.decoder) throw ContractError("model has no decoder");
  return detail::run_inference(*m.decoder, z);
}

/// Raw classifier outputs before softmax.
inline Tensor classifier_logits(const ModelTriplet& m, const Tensor& z) {
  return detail::run_inference(m.classifier, z);
}

/// Class probabilities (softmax of the classifier logits).
inline Tensor forward_classifier(const ModelTriplet& m, const Tensor& z) {
  return detail::row_softmax(classifier_logits(m, z));
}

/// Full reconstruction path X -> X~, through the separate encoder when the
/// model has one.
inline Tensor reconstruct(const ModelTriplet& m, const Tensor& x) {
  if (!m.decoder) throw ContractError("model has no decoder");
  return detail::run_inference(*m.decoder, detail::run_inference(m.reconstruction_encoder(), x));
}

/// Per-row argmax; ties resolve to the lowest index.
inline std::vector<std::size_t> argmax_rows(const Tensor& probs) {
  detail::require_rank(probs, 2, "argmax_rows", "probs");
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  std::vector<std::size_t> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = probs.data().data() + r * k;
    out[r] = static_cast<std::size_t>(std::max_element(row, row + k) - row);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint container
//
//   "MLOSRCKP" | u32 version | str encoder | str decoder | str classifier
//   | shape input | u8 flags (bit0 decoder, bit1 separate encoder)
//   | network blocks: encoder, [decoder], classifier, [recon encoder]
//
// A network block is u32 tensor count followed by tensors (shape + LE
// doubles). All integers little-endian.

inline constexpr std::string_view kCheckpointMagic = "MLOSRCKP";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_network(std::ostream& os, const Network& net) {
  std::uint32_t count = 0;
  for (const auto& layer : net.params) count += static_cast<std::uint32_t>(layer.size());
  binary::write_u32(os, count);
  for (const auto& layer : net.params)
    for (const auto& t : layer) binary::write_tensor(os, t);
}

inline Network read_network(std::istream& is, const ArchitectureSpec& spec, const char* which) {
  Network net = init_parameters(spec, 0);
  std::uint32_t expected = 0;
  for (const auto& layer : net.params) expected += static_cast<std::uint32_t>(layer.size());
  const std::uint32_t count = binary::read_u32(is, which);
  if (count != expected) {
    throw ParseError(std::string("checkpoint ") + which + " block has " + std::to_string(count) +
                  " tensors, architecture needs " + std::to_string(expected));
  }
  for (auto& layer : net.params) {
    for (auto& t : layer) {
      Tensor loaded = binary::read_tensor(is, which);
      if (loaded.shape() != t.shape()) {
        throw ParseError(std::string("checkpoint ") + which + " tensor shape " + shape_string(loaded.shape()) +
                      " does not match architecture " + shape_string(t.shape()));
      }
      t = std::move(loaded);
    }
  }
  return net;
}

}  // namespace detail

inline void save_checkpoint(std::ostream& os, const ModelTriplet& m) {
  os.write(kCheckpointMagic.data(), static_cast<std::streamsize>(kCheckpointMagic.size()));
  binary::write_u32(os, kCheckpointVersion);
  binary::write_string(os, m.config.encoder);
  binary::write_string(os, m.config.decoder);
  binary::write_string(os, m.config.classifier);
  binary::write_shape(os, m.config.input_shape);
  const char flags = static_cast<char>((m.decoder ? 1 : 0) | (m.recon_encoder ? 2 : 0));
  os.put(flags);
  detail::write_network(os, m.encoder);
  if (m.decoder) detail::write_network(os, *m.decoder);
  detail::write_network(os, m.classifier);
  if (m.recon_encoder) detail::write_network(os, *m.recon_encoder);
}

inline ModelTriplet load_checkpoint(std::istream& is) {
  binary::expect_magic(is, kCheckpointMagic, "checkpoint");
  const std::uint32_t version = binary::read_u32(is, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version));
  }
  ModelConfig cfg;
  cfg.encoder = binary::read_string(is, "encoder architecture");
  cfg.decoder = binary::read_string(is, "decoder architecture");
  cfg.classifier = binary::read_string(is, "classifier architecture");
  cfg.input_shape = binary::read_shape(is, "input shape");
  char flags = 0;
  binary::read_exact(is, &flags, 1, "checkpoint flags");

  ModelSpecs specs = resolve_model_specs(cfg);
  ModelTriplet m;
  m.config = cfg;
  m.latent_dim = specs.latent_dim;
  m.num_classes = specs.num_classes;
  m.encoder = detail::read_network(is, specs.encoder, "encoder");
  if (flags & 1) m.decoder = detail::read_network(is, specs.decoder, "decoder");
  m.classifier = detail::read_network(is, specs.classifier, "classifier");
  if (flags & 2) m.recon_encoder = detail::read_network(is, specs.encoder, "reconstruction encoder");
  return m;
}

inline void save_checkpoint(const std::string& path, const ModelTriplet& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  save_checkpoint(os, m);
  if (!os) throw IoError("write failed for " + path);
}

inline ModelTriplet load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  try {
    return load_checkpoint(is);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

}  // namespace mlosr
