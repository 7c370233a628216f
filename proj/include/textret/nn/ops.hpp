#pragma once

// Differentiable operators. Every op records its output on the inputs' tape and,
// when any input needs a gradient, a closure that back-propagates into them.

#include <vector>

#include "textret/geometry.hpp"
#include "textret/nn/tape.hpp"

namespace textret::nn {

// Elementwise ------------------------------------------------------------------

template <class Scalar> Var<Scalar> add(Var<Scalar> a, Var<Scalar> b);
template <class Scalar> Var<Scalar> scale(Var<Scalar> a, Scalar s);
template <class Scalar> Var<Scalar> relu(Var<Scalar> a);
template <class Scalar> Var<Scalar> tanh(Var<Scalar> a);
template <class Scalar> Var<Scalar> sigmoid(Var<Scalar> a);
template <class Scalar> Var<Scalar> reshape(Var<Scalar> a, Shape shape);

/// Sum of one-element vars (empty list gives a constant zero on `tape`).
template <class Scalar> Var<Scalar> sum_scalars(Tape<Scalar>& tape, const std::vector<Var<Scalar>>& terms);

// Convolution and normalisation -------------------------------------------------

struct ConvSpec {
  int stride_h = 1, stride_w = 1;
  int pad_h = 0, pad_w = 0;
};

/// x [N,Cin,H,W], weight [Cout,Cin,kh,kw], bias [Cout] -> [N,Cout,Ho,Wo].
template <class Scalar> Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias, ConvSpec spec);

/// x [N,C,H,W]; gamma/beta [C].
template <class Scalar>
Var<Scalar> group_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, int groups, Scalar eps = Scalar(1e-5));

/// Nearest-neighbour upsampling of [N,C,H,W] to [N,C,out_h,out_w].
template <class Scalar> Var<Scalar> upsample_nearest(Var<Scalar> x, int out_h, int out_w);

// Region and sequence ops --------------------------------------------------------

/// Bilinear RoI pooling of feature map [1,C,H,W] at `spatial_scale` (feature px per image px),
/// half-pixel aligned, `sampling` x `sampling` samples per bin -> [K,C,out_h,out_w].
template <class Scalar>
Var<Scalar> roi_align(Var<Scalar> feature, const std::vector<Box>& boxes, double spatial_scale, int out_h, int out_w,
                      int sampling = 2);

/// [K,C,H,W] -> [K,W,C]: mean over height, then channels-last along the width axis.
template <class Scalar> Var<Scalar> average_height(Var<Scalar> x);

/// x [..., Din], weight [Dout, Din], bias [Dout] -> [..., Dout].
template <class Scalar> Var<Scalar> linear(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias);

/// Single-direction LSTM over [K,T,Din] with gates ordered (i, f, g, o); returns hidden states [K,T,H].
template <class Scalar>
Var<Scalar> lstm(Var<Scalar> x, Var<Scalar> w_input, Var<Scalar> w_hidden, Var<Scalar> bias, bool reverse);

/// Concatenate along the last axis.
template <class Scalar> Var<Scalar> concat_last(Var<Scalar> a, Var<Scalar> b);
/// Concatenate along the first axis; all trailing dims must agree.
template <class Scalar> Var<Scalar> concat_rows(Tape<Scalar>& tape, const std::vector<Var<Scalar>>& parts, const Shape& trailing);

/// Character embedding lookup followed by linear resampling of each word to `steps` positions
/// (endpoint aligned). table [V,D] -> [N,steps,D].
template <class Scalar>
Var<Scalar> embed_interpolate(Var<Scalar> table, const std::vector<std::vector<int>>& words, int steps);

/// Resampling weights used by embed_interpolate: steps x length, rows sum to one.
template <class Scalar> RowMatrix<Scalar> interpolation_matrix(int length, int steps);

/// [N,C,H,W] -> [N*H*W, C].
template <class Scalar> Var<Scalar> nchw_to_rows(Var<Scalar> x);
/// Select rows of a 2-d var.
template <class Scalar> Var<Scalar> gather_rows(Var<Scalar> x, const std::vector<int>& rows);

/// Pairwise cosine of the rows of a [N,D] and b [K,D] -> [N,K].
template <class Scalar> Var<Scalar> cosine(Var<Scalar> a, Var<Scalar> b);

// Losses (all return one-element vars) ---------------------------------------------

enum class RowReduce { Max, Mean };

/// mean_i reduce_j smooth_l1(pred_ij - target_ij) with threshold beta.
template <class Scalar>
Var<Scalar> smooth_l1_rows(Var<Scalar> pred, const RowMatrix<Scalar>& target, Scalar beta = Scalar(1),
                           RowReduce reduce = RowReduce::Max);

/// CTC negative log-likelihood on logits [K,T,V] (softmax applied inside), each item divided by
/// its label length and averaged over items. Infeasible alignments contribute zero.
template <class Scalar>
Var<Scalar> ctc_loss(Var<Scalar> logits, const std::vector<std::vector<int>>& labels, int blank);

/// Per-item CTC negative log-likelihood (no grad), +inf when infeasible.
template <class Scalar>
std::vector<Scalar> ctc_nll(const Tensor<Scalar>& logits, const std::vector<std::vector<int>>& labels, int blank);

/// Sigmoid focal loss summed over all elements and divided by `normalizer`.
template <class Scalar>
Var<Scalar> sigmoid_focal_loss(Var<Scalar> logits, const Vector<Scalar>& targets, Scalar alpha, Scalar gamma,
                               Scalar normalizer);

/// Weighted binary cross-entropy with logits, divided by `normalizer`.
template <class Scalar>
Var<Scalar> bce_with_logits(Var<Scalar> logits, const Vector<Scalar>& targets, const Vector<Scalar>& weights,
                            Scalar normalizer);

/// -log IoU between boxes given as side distances. Predictions are exp(raw) * stride per row.
/// raw [M,4], strides [M], targets [M,4] (pixels), weighted and divided by `normalizer`.
template <class Scalar>
Var<Scalar> iou_loss_exp(Var<Scalar> raw, const Vector<Scalar>& strides, const RowMatrix<Scalar>& targets,
                         const Vector<Scalar>& weights, Scalar normalizer);

}  // namespace textret::nn
