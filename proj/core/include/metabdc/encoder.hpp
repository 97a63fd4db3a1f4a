#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "metabdc/array.hpp"
#include "metabdc/graph.hpp"
#include "metabdc/rng.hpp"

namespace metabdc {

struct ConvStage {
  std::size_t out_channels = 16;
  std::size_t kernel = 3;
  std::size_t stride = 2;
};

/// Convolutional feature extractor followed by relu after each stage, plus
/// the shape of the contrastive projection head.
struct EncoderConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 1;
  std::vector<ConvStage> stages = {{16, 3, 2}, {32, 3, 2}, {64, 3, 2}};
  std::size_t projection_hidden = 64;
  std::size_t projection_dim = 32;

  /// d: channels of the last stage.
  std::size_t embedding_channels() const;
  /// m: spatial positions of the last stage (H' x W').
  std::size_t positions() const;
  std::size_t output_height() const;
  std::size_t output_width() const;
  /// Throws Error unless d >= 2, m >= 2 and every stage is well formed.
  void validate() const;
  /// Stable identifier of everything that determines parameter shapes.
  std::string digest() const;
};

/// Encoder output for one image: a [d, m] array (channels x positions).
template <typename T>
struct FeatureMap {
  Array<T> values;
  std::size_t channels() const { return values.dim(0); }
  std::size_t positions() const { return values.dim(1); }
};

/// Unit-norm contrastive embedding.
template <typename T>
struct ProjectionVector {
  Array<T> values;
};

/// Glorot-uniform weights, zero biases: conv stages and projection head.
template <typename T>
ParameterSet<T> init_encoder(const EncoderConfig& config, SeededRng& rng);

/// Adds "cls.weight" [d, n] and "cls.bias" [n] to an existing set.
template <typename T>
void add_classifier_head(ParameterSet<T>& params, const EncoderConfig& config,
                         std::size_t n_classes, SeededRng& rng);

/// Packs H x W x C images into one [B, C, H, W] array.
template <typename T>
Array<T> pack_images(std::span<const Array<T>> images, const EncoderConfig& config);

// Graph builders -----------------------------------------------------------

/// images [B, C, H, W] -> feature maps [B, d, m].
template <typename T>
NodeId build_encoder(Graph<T>& graph, const EncoderConfig& config, NodeId images);
/// Mean over positions: [B, d, m] -> [B, d].
template <typename T>
NodeId build_pool(Graph<T>& graph, NodeId feature_maps);
/// [B, d, m] -> unit-norm [B, p].
template <typename T>
NodeId build_projection(Graph<T>& graph, NodeId feature_maps);
/// [B, d, m] -> raw scores [B, n].
template <typename T>
NodeId build_classifier(Graph<T>& graph, NodeId feature_maps, std::size_t n_classes);

// Standalone evaluation ----------------------------------------------------

template <typename T>
std::vector<FeatureMap<T>> encode(std::span<const Array<T>> images, const EncoderConfig& config,
                                  const ParameterSet<T>& params);
/// Errors when the pre-normalization vector is all zero.
template <typename T>
ProjectionVector<T> project(const FeatureMap<T>& fm, const ParameterSet<T>& params);
template <typename T>
Array<T> classify(const FeatureMap<T>& fm, const ParameterSet<T>& params, std::size_t n_classes);

// Checkpoints ----------------------------------------------------------------
//
// Layout: "MBCK" | u16 version | u32 digest length | digest bytes
//         | u32 entry count | per entry: u32 name length | name | array

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParameterSet<T>& params,
                     const std::string& digest);
/// Throws FormatError when the stored digest differs from `expected_digest`
/// (unless the expectation is empty).
template <typename T>
ParameterSet<T> load_checkpoint(const std::filesystem::path& path,
                                const std::string& expected_digest);

}  // namespace metabdc
