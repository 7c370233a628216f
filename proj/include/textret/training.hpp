#pragma once

// Joint optimisation of detection, similarity and CTC objectives.

#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "textret/checkpoint.hpp"
#include "textret/synthgen.hpp"
#include "textret/word_augment.hpp"

namespace textret {

enum class TrainMode { Joint, Separated, PhocHead, NoPPQQ, NoWAS, NoCTC, Baseline };

std::string to_string(TrainMode mode);
/// Mode names, plus the ablation aliases "+was+ctc" (joint), "+was" (no_ctc), "+ctc" (no_was).
TrainMode parse_mode(const std::string& name);

struct TrainConfig {
  TrainMode mode = TrainMode::Joint;
  int iterations = 5000;
  int batch_size = 2;
  double lr = 0.01;
  bool decay_auto = true;        // decay at 60% and 85% of training
  std::vector<int> decay_steps;  // used when decay_auto is false
  double decay_factor = 0.1;
  int warmup = 100;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double clip_norm = 10.0;
  EditOperatorRatios was;
  nn::RowReduce row_reduce = nn::RowReduce::Max;
  std::uint64_t seed = 1234;
  int proposals_per_image = 4;
  int checkpoint_every = 1000;
  int log_every = 10;
  bool fold_case = true;
  ModelConfig model;

  std::vector<int> resolved_decay_steps() const;
  double learning_rate(int iteration) const;  // iteration counts from 1
  bool uses_was() const { return mode != TrainMode::NoWAS && mode != TrainMode::Baseline; }
  bool uses_ctc() const { return mode != TrainMode::NoCTC && mode != TrainMode::Baseline; }
  void validate() const;
};

/// Flat key/value view of a TrainConfig; every key is also a CLI flag.
std::map<std::string, std::string> config_values(const TrainConfig& config);
/// Sets keys from text values; unknown keys and malformed values throw InvalidInput.
void apply_config_values(TrainConfig& config, const std::map<std::string, std::string>& values);
/// `key = value` lines, `#` comments.
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);
/// (key, description) for every config key, in a stable order.
const std::vector<std::pair<std::string, std::string>>& config_docs();

/// Signals a batch without any text instance; the trainer skips it.
struct EmptyBatch : std::runtime_error {
  EmptyBatch() : std::runtime_error("batch has no text instances") {}
};

struct QuerySet {
  std::vector<Word> queries;    // Q: distinct transcripts in first-seen order
  std::vector<Word> augmented;  // Q followed by one pseudoword per query
};

QuerySet build_queries(const std::vector<Word>& transcripts, const EditOperatorRatios& ratios, const Charset& charset,
                       Rng& rng);

struct ProposalMatch {
  int proposal = -1;
  int gt = -1;
  double iou = 0;
};

/// Each proposal is matched to its highest-IoU ground-truth box when that IoU reaches `thresh`.
std::vector<ProposalMatch> match_proposals(const std::vector<Box>& proposals, const std::vector<Box>& gt,
                                           double thresh = 0.5);

template <class Scalar>
struct SimilarityTerms {
  nn::Var<Scalar> pp;  // (K, K)
  nn::Var<Scalar> qp;  // (2N, K)
  nn::Var<Scalar> qq;  // (2N, 2N)
};

template <class Scalar>
struct SimilarityTargets {
  nn::RowMatrix<Scalar> pp, qp, qq;
};

/// Edit-distance targets for proposal transcripts and the augmented query set.
template <class Scalar>
SimilarityTargets<Scalar> similarity_targets(const std::vector<Word>& transcripts, const std::vector<Word>& augmented);

/// Sum over the three matrix pairs of the row-reduced smooth-L1 error averaged over rows.
/// Without `with_pp_qq` only the (2N, K) term is used.
template <class Scalar>
nn::Var<Scalar> loss_similarity(nn::Tape<Scalar>& tape, const SimilarityTerms<Scalar>& predicted,
                                const SimilarityTargets<Scalar>& targets, nn::RowReduce reduce = nn::RowReduce::Max,
                                bool with_pp_qq = true);

/// L_d + L_s + L_c; a non-finite or negative term raises TrainingFailure naming it.
double loss_total(double detection, double similarity, double ctc);

/// Focal classification + IoU regression + centerness cross-entropy for one image.
template <class Scalar>
nn::Var<Scalar> detection_loss(nn::Tape<Scalar>& tape, const HeadOutputs<Scalar>& head, const std::vector<Box>& gt,
                               double level_split);

struct MetricsRow {
  int iteration = 0;
  double detection = 0, similarity = 0, ctc = 0, total = 0, lr = 0;
  double grad_norm = 0;  // before clipping
};

/// What the similarity loss saw in one iteration.
struct BatchRecord {
  int iteration = 0;
  std::vector<Word> transcripts;
  QuerySet queries;
  SimilarityTargets<double> targets;
};
using BatchObserver = std::function<void(const BatchRecord&)>;

struct TrainResult {
  TrainedModel trained;
  std::vector<MetricsRow> metrics;
  int updates = 0;
  std::filesystem::path checkpoint;
  std::filesystem::path metrics_csv;
};

/// Trains on every sample of the manifest. Writes out_dir/checkpoint.bin, periodic
/// out_dir/checkpoint_<iter>.bin and out_dir/metrics.csv. A NaN loss writes out_dir/diverged.bin
/// and throws TrainingFailure.
TrainResult train(const TrainConfig& config, const GalleryManifest& manifest, const std::filesystem::path& out_dir,
                  const BatchObserver& observer = {});

}  // namespace textret
