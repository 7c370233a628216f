#pragma once

// Joint detection + cross-modal sequence-feature network.

#include <cstdint>
#include <string>
#include <vector>

#include "textret/detection.hpp"
#include "textret/image.hpp"
#include "textret/nn/ops.hpp"
#include "textret/similarity.hpp"

namespace textret {

/// What the recognition branch predicts from a proposal.
enum class HeadKind { Similarity, Phoc };

struct ModelConfig {
  int C = 32;                  // sequence channels; backbone/FPN output has 2C
  int T = 15;                  // sequence length
  int h_roi = 8;
  int backbone_width = 16;
  int charset_size = 36;
  int max_word_len = 32;
  double nms_iou = 0.5;
  double score_thresh = 0.1;
  int max_proposals = 100;
  int gn_groups = 4;
  double level_split = 18.0;   // GT boxes at least this tall train the coarse level
  HeadKind head = HeadKind::Similarity;
  bool crop_input = false;     // recognition branch reads resized crops instead of shared RoI features
  std::vector<int> phoc_levels{2, 3, 4, 5};

  /// Desk-scale defaults.
  static ModelConfig desk(int charset_size);
  /// The published sequence geometry: T = 15, C = 128.
  static ModelConfig full(int charset_size);

  int feature_dim() const { return T * C; }
  int fpn_channels() const { return 2 * C; }
  int num_classes() const { return charset_size + 1; }
  int phoc_dim() const;
  std::vector<int> strides() const { return {4, 8}; }
  /// Crops are resized to crop_height() x crop_width() and reduced by a stride-4 stem to h_roi x T.
  int crop_height() const { return 4 * h_roi; }
  int crop_width() const { return 4 * T; }

  /// Throws InvalidInput naming the violated invariant.
  void validate() const;
};

/// [1,3,H,W] tensor from an image, centred and scaled.
template <class Scalar>
nn::Tensor<Scalar> image_tensor(const Image& image);

/// Per-level raw detection head outputs.
template <class Scalar>
struct HeadOutputs {
  std::vector<FeatureLevel> levels;
  std::vector<nn::Var<Scalar>> cls;  // [1,1,H,W]
  std::vector<nn::Var<Scalar>> reg;  // [1,4,H,W]
  std::vector<nn::Var<Scalar>> ctr;  // [1,1,H,W]
};

template <class Scalar>
class Model {
 public:
  using Var = nn::Var<Scalar>;
  using Tape = nn::Tape<Scalar>;

  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  nn::ParameterStore<Scalar>& params() { return params_; }
  const nn::ParameterStore<Scalar>& params() const { return params_; }

  /// FPN maps [1,2C,H/s,W/s] for each stride, finest first.
  std::vector<Var> backbone(Tape& tape, const nn::Tensor<Scalar>& image) const;
  HeadOutputs<Scalar> detection_head(Tape& tape, const std::vector<Var>& pyramid) const;
  ProposalSet decode(const HeadOutputs<Scalar>& head, int image_height, int image_width) const;

  /// Backbone, head and decode without gradients.
  ProposalSet detect(const Image& image) const;

  /// Bilinear pooling from the finest pyramid level -> [K,2C,h_roi,T].
  Var roi_features(const std::vector<Var>& pyramid, const std::vector<Box>& boxes) const;
  /// Crop-network features: crops [K,3,crop_height(),crop_width()] -> [K,2C,h_roi,T].
  Var crop_features(Tape& tape, const nn::Tensor<Scalar>& crops) const;
  /// [K,2C,h_roi,T] -> [K,T,C].
  Var image_s2sm(Tape& tape, Var pooled) const;

  /// Character embedding + interpolation to T steps -> [N,T,2C].
  Var embed_words(Tape& tape, const std::vector<Word>& words) const;
  /// [N,T,2C] -> [N,T,C].
  Var text_s2sm(Tape& tape, Var embedded) const;

  /// [K,T,C] -> [K,T,|charset|+1], last class is the blank.
  Var ctc_logits(Tape& tape, Var sequence) const;
  /// [K,T,C] -> [K,phoc_dim] logits.
  Var phoc_logits(Tape& tape, Var sequence) const;

  /// [K,T,C] -> [K,T*C] after tanh; rows are the vectors compared by cosine.
  Var flatten_features(Var sequence) const;

  /// Hash of the configuration and parameter values.
  std::uint64_t fingerprint() const;

 private:
  Var conv(Tape& tape, Var x, const std::string& name, nn::ConvSpec spec) const;
  Var conv_gn_relu(Tape& tape, Var x, const std::string& name, nn::ConvSpec spec, bool relu = true) const;
  Var residual(Tape& tape, Var x, const std::string& name) const;
  Var bilstm(Tape& tape, Var x, const std::string& name) const;
  Var p(Tape& tape, const std::string& name) const;

  ModelConfig config_;
  mutable nn::ParameterStore<Scalar> params_;
};

/// Collapse repeats and drop blanks of the per-step argmax.
std::vector<int> greedy_decode(const Eigen::Ref<const Eigen::MatrixXd>& logits, int blank);

}  // namespace textret
