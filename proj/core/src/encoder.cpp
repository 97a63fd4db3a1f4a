#include "metabdc/encoder.hpp"

#include <cmath>
#include <fstream>

#include "metabdc/ops.hpp"
#include "metabdc/serialize.hpp"

namespace metabdc {

namespace {

std::size_t stage_out(std::size_t in, const ConvStage& s) {
  const std::size_t pad = s.kernel / 2;
  return (in + 2 * pad - s.kernel) / s.stride + 1;
}

template <typename T>
Array<T> glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, SeededRng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Array<T> out(std::move(shape));
  for (auto& v : out.data()) v = static_cast<T>(rng.uniform(-limit, limit));
  return out;
}

void put_u32(std::ostream& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    const int c = in.get();
    if (c == EOF) throw FormatError("checkpoint truncated");
    v |= static_cast<std::uint32_t>(c & 0xFF) << (8 * i);
  }
  return v;
}

std::string get_string(std::istream& in) {
  const std::uint32_t n = get_u32(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw FormatError("checkpoint truncated");
  return s;
}

constexpr char kCheckpointMagic[4] = {'M', 'B', 'C', 'K'};
constexpr std::uint16_t kCheckpointVersion = 1;

}  // namespace

std::size_t EncoderConfig::embedding_channels() const {
  return stages.empty() ? channels : stages.back().out_channels;
}

std::size_t EncoderConfig::output_height() const {
  std::size_t h = height;
  for (const auto& s : stages) h = stage_out(h, s);
  return h;
}

std::size_t EncoderConfig::output_width() const {
  std::size_t w = width;
  for (const auto& s : stages) w = stage_out(w, s);
  return w;
}

std::size_t EncoderConfig::positions() const { return output_height() * output_width(); }

void EncoderConfig::validate() const {
  if (height == 0 || width == 0 || channels == 0) throw Error("encoder: empty input size");
  std::size_t h = height, w = width;
  for (const auto& s : stages) {
    if (s.out_channels == 0 || s.kernel == 0 || s.stride == 0) {
      throw Error("encoder: conv stage fields must be positive");
    }
    if (s.kernel > 5) throw Error("encoder: kernels larger than 5x5 are not supported");
    if (h + 2 * (s.kernel / 2) < s.kernel || w + 2 * (s.kernel / 2) < s.kernel) {
      throw Error("encoder: kernel larger than padded input");
    }
    h = stage_out(h, s);
    w = stage_out(w, s);
  }
  if (embedding_channels() < 2) throw Error("encoder: embedding channels d must be >= 2");
  if (positions() < 2) throw Error("encoder: spatial positions m must be >= 2");
  if (projection_hidden == 0 || projection_dim == 0) throw Error("encoder: empty projection head");
}

std::string EncoderConfig::digest() const {
  std::string s = "in=" + std::to_string(height) + "x" + std::to_string(width) + "x" +
                  std::to_string(channels) + ";stages=";
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(stages[i].out_channels) + ":" + std::to_string(stages[i].kernel) + ":" +
         std::to_string(stages[i].stride);
  }
  s += ";proj=" + std::to_string(projection_hidden) + ":" + std::to_string(projection_dim);
  return s;
}

template <typename T>
ParameterSet<T> init_encoder(const EncoderConfig& config, SeededRng& rng) {
  config.validate();
  ParameterSet<T> params;
  std::size_t in_c = config.channels;
  for (std::size_t i = 0; i < config.stages.size(); ++i) {
    const auto& s = config.stages[i];
    const std::size_t k2 = s.kernel * s.kernel;
    const std::string prefix = "conv" + std::to_string(i);
    params.add(prefix + ".weight",
               glorot<T>({s.out_channels, in_c, s.kernel, s.kernel}, in_c * k2,
                         s.out_channels * k2, rng));
    params.add(prefix + ".bias", Array<T>({s.out_channels}));
    in_c = s.out_channels;
  }
  const std::size_t d = config.embedding_channels();
  params.add("proj.fc1.weight",
             glorot<T>({d, config.projection_hidden}, d, config.projection_hidden, rng));
  params.add("proj.fc1.bias", Array<T>({config.projection_hidden}));
  params.add("proj.fc2.weight",
             glorot<T>({config.projection_hidden, config.projection_dim},
                       config.projection_hidden, config.projection_dim, rng));
  params.add("proj.fc2.bias", Array<T>({config.projection_dim}));
  return params;
}

template <typename T>
void add_classifier_head(ParameterSet<T>& params, const EncoderConfig& config,
                         std::size_t n_classes, SeededRng& rng) {
  if (n_classes < 2) throw Error("classifier head needs at least 2 classes");
  const std::size_t d = config.embedding_channels();
  params.add("cls.weight", glorot<T>({d, n_classes}, d, n_classes, rng));
  params.add("cls.bias", Array<T>({n_classes}));
}

template <typename T>
Array<T> pack_images(std::span<const Array<T>> images, const EncoderConfig& config) {
  const std::size_t h = config.height, w = config.width, c = config.channels;
  Array<T> out({images.size(), c, h, w});
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Array<T>& img = images[n];
    const Shape expected{h, w, c};
    if (img.shape() != expected) {
      throw ShapeError("image " + std::to_string(n) + " has shape " + shape_str(img.shape()) +
                       ", encoder expects " + shape_str(expected));
    }
    T* dst = out.ptr() + n * c * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          dst[(ch * h + y) * w + x] = img[(y * w + x) * c + ch];
        }
      }
    }
  }
  return out;
}

template <typename T>
NodeId build_encoder(Graph<T>& graph, const EncoderConfig& config, NodeId images) {
  NodeId x = images;
  for (std::size_t i = 0; i < config.stages.size(); ++i) {
    const auto& s = config.stages[i];
    const std::string prefix = "conv" + std::to_string(i);
    x = ops::conv2d(graph, x, graph.parameter(prefix + ".weight"),
                    graph.parameter(prefix + ".bias"), s.stride, s.kernel / 2);
    x = ops::relu(graph, x);
  }
  const Shape s = graph.shape(x);
  return ops::reshape(graph, x, Shape{s[0], s[1], s[2] * s[3]});
}

template <typename T>
NodeId build_pool(Graph<T>& graph, NodeId feature_maps) {
  return ops::mean_last_axis(graph, feature_maps);
}

template <typename T>
NodeId build_projection(Graph<T>& graph, NodeId feature_maps) {
  NodeId h = build_pool(graph, feature_maps);
  h = ops::add_row_bias(graph, ops::matmul(graph, h, graph.parameter("proj.fc1.weight")),
                        graph.parameter("proj.fc1.bias"));
  h = ops::relu(graph, h);
  h = ops::add_row_bias(graph, ops::matmul(graph, h, graph.parameter("proj.fc2.weight")),
                        graph.parameter("proj.fc2.bias"));
  return ops::l2_normalize_rows(graph, h);
}

template <typename T>
NodeId build_classifier(Graph<T>& graph, NodeId feature_maps, std::size_t n_classes) {
  if (n_classes < 2) throw Error("classify: need at least 2 classes");
  NodeId pooled = build_pool(graph, feature_maps);
  NodeId scores = ops::add_row_bias(graph, ops::matmul(graph, pooled, graph.parameter("cls.weight")),
                                    graph.parameter("cls.bias"));
  if (graph.shape(scores)[1] != n_classes) {
    throw ShapeError("classifier head has " + std::to_string(graph.shape(scores)[1]) +
                     " outputs, expected " + std::to_string(n_classes));
  }
  return scores;
}

template <typename T>
std::vector<FeatureMap<T>> encode(std::span<const Array<T>> images, const EncoderConfig& config,
                                  const ParameterSet<T>& params) {
  Array<T> packed = pack_images(images, config);
  Graph<T> graph(&params);
  NodeId in = graph.input("images", packed.shape());
  NodeId fm = build_encoder(graph, config, in);
  graph.forward({{"images", std::move(packed)}});
  const Array<T>& all = graph.value(fm);
  const std::size_t d = all.dim(1), m = all.dim(2);
  std::vector<FeatureMap<T>> out;
  out.reserve(images.size());
  for (std::size_t n = 0; n < images.size(); ++n) {
    std::vector<T> v(all.ptr() + n * d * m, all.ptr() + (n + 1) * d * m);
    out.push_back({Array<T>({d, m}, std::move(v))});
  }
  return out;
}

namespace {
template <typename T>
Array<T> run_head(const FeatureMap<T>& fm, const ParameterSet<T>& params, bool projection,
                  std::size_t n_classes) {
  if (fm.values.rank() != 2) throw ShapeError("feature map must be [d, m]");
  if (!fm.values.all_finite()) throw NumericError("feature map has non-finite values");
  Graph<T> graph(&params);
  const Shape s{1, fm.values.dim(0), fm.values.dim(1)};
  NodeId in = graph.input("fm", s);
  NodeId out = projection ? build_projection(graph, in) : build_classifier(graph, in, n_classes);
  graph.forward({{"fm", fm.values.reshaped(s)}});
  const Array<T>& v = graph.value(out);
  return v.reshaped({v.size()});
}
}  // namespace

template <typename T>
ProjectionVector<T> project(const FeatureMap<T>& fm, const ParameterSet<T>& params) {
  return {run_head(fm, params, true, 0)};
}

template <typename T>
Array<T> classify(const FeatureMap<T>& fm, const ParameterSet<T>& params, std::size_t n_classes) {
  if (n_classes < 2) throw Error("classify: need at least 2 classes");
  return run_head(fm, params, false, n_classes);
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParameterSet<T>& params,
                     const std::string& digest) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, 4);
  out.put(static_cast<char>(kCheckpointVersion & 0xFF));
  out.put(static_cast<char>(kCheckpointVersion >> 8));
  put_u32(out, static_cast<std::uint32_t>(digest.size()));
  out.write(digest.data(), static_cast<std::streamsize>(digest.size()));
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.names()[i];
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_array(out, params.value_at(i));
  }
  if (!out) throw FormatError("failed writing checkpoint " + path.string());
}

template <typename T>
ParameterSet<T> load_checkpoint(const std::filesystem::path& path,
                                const std::string& expected_digest) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != std::string(kCheckpointMagic, 4)) {
    throw FormatError(path.string() + " is not a checkpoint");
  }
  const int lo = in.get(), hi = in.get();
  if (((hi << 8) | lo) != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  const std::string digest = get_string(in);
  if (!expected_digest.empty() && digest != expected_digest) {
    throw FormatError("checkpoint config mismatch: stored '" + digest + "', expected '" +
                      expected_digest + "'");
  }
  const std::uint32_t count = get_u32(in);
  ParameterSet<T> params;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = get_string(in);
    params.add(name, read_array<T>(in));
  }
  return params;
}

#define METABDC_INSTANTIATE_ENCODER(T)                                                        \
  template ParameterSet<T> init_encoder(const EncoderConfig&, SeededRng&);                   \
  template void add_classifier_head(ParameterSet<T>&, const EncoderConfig&, std::size_t,     \
                                    SeededRng&);                                             \
  template Array<T> pack_images(std::span<const Array<T>>, const EncoderConfig&);            \
  template NodeId build_encoder(Graph<T>&, const EncoderConfig&, NodeId);                    \
  template NodeId build_pool(Graph<T>&, NodeId);                                             \
  template NodeId build_projection(Graph<T>&, NodeId);                                       \
  template NodeId build_classifier(Graph<T>&, NodeId, std::size_t);                          \
  template std::vector<FeatureMap<T>> encode(std::span<const Array<T>>, const EncoderConfig&, \
                                             const ParameterSet<T>&);                        \
  template ProjectionVector<T> project(const FeatureMap<T>&, const ParameterSet<T>&);        \
  template Array<T> classify(const FeatureMap<T>&, const ParameterSet<T>&, std::size_t);     \
  template void save_checkpoint(const std::filesystem::path&, const ParameterSet<T>&,        \
                                const std::string&);                                         \
  template ParameterSet<T> load_checkpoint(const std::filesystem::path&, const std::string&);

METABDC_INSTANTIATE_ENCODER(float)
METABDC_INSTANTIATE_ENCODER(double)

}  // namespace metabdc
