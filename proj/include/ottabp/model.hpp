#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ottabp/common.hpp"
#include "ottabp/signal.hpp"

namespace ottabp {

struct ModelGeometry {
  int d = 16;  // token width
  int h = 32;  // hidden width
  int S = 16;  // tokens per segment (L = S*d)
  int E = 2;   // encoder blocks

  int window_length() const { return S * d; }
  void validate() const;
  bool operator==(const ModelGeometry&) const = default;
};

// One pre-norm encoder block: {LN -> single-head self-attention -> residual;
// LN -> MLP(GELU) -> residual}. Biases are 1 x n row matrices so every
// parameter is a plain MatrixXd.
struct EncoderBlock {
  Eigen::MatrixXd Wq, Wk, Wv, Wo;              // h x h
  Eigen::MatrixXd mlp_W1, mlp_W2;              // h x 4h, 4h x h
  Eigen::MatrixXd mlp_b1, mlp_b2;              // 1 x 4h, 1 x h
  Eigen::MatrixXd ln1_gamma, ln1_beta;         // 1 x h
  Eigen::MatrixXd ln2_gamma, ln2_beta;         // 1 x h
};

// Two-layer GELU MLP head; used for the reconstruction decoder (h->h->d)
// and the blood-pressure regressor (h->h->2).
struct HeadMlp {
  Eigen::MatrixXd W1, W2;  // h x h, h x out
  Eigen::MatrixXd b1, b2;  // 1 x h, 1 x out
};

// All weights of the dual-head network. Doubles throughout.
struct ModelParams {
  ModelGeometry geo;
  Eigen::MatrixXd embed_W;     // d x h
  Eigen::MatrixXd embed_b;     // 1 x h
  Eigen::MatrixXd pos;         // S x h positional table
  Eigen::MatrixXd mask_token;  // 1 x h
  std::vector<EncoderBlock> blocks;
  HeadMlp decoder;    // self-supervision head
  HeadMlp regressor;  // supervision head
};

// One tensor per ModelParams field, same shapes.
using GradientBundle = ModelParams;

// Visits every tensor in a fixed order (init, SGD, serialization, and
// finite-difference sweeps all rely on the same ordering).
template <typename Params, typename Fn>
void for_each_tensor(Params& p, Fn&& fn) {
  fn("embed.W", p.embed_W);
  fn("embed.b", p.embed_b);
  fn("pos", p.pos);
  fn("mask_token", p.mask_token);
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    const std::string prefix = "block" + std::to_string(b) + ".";
    auto& blk = p.blocks[b];
    fn(prefix + "Wq", blk.Wq);
    fn(prefix + "Wk", blk.Wk);
    fn(prefix + "Wv", blk.Wv);
    fn(prefix + "Wo", blk.Wo);
    fn(prefix + "mlp.W1", blk.mlp_W1);
    fn(prefix + "mlp.b1", blk.mlp_b1);
    fn(prefix + "mlp.W2", blk.mlp_W2);
    fn(prefix + "mlp.b2", blk.mlp_b2);
    fn(prefix + "ln1.gamma", blk.ln1_gamma);
    fn(prefix + "ln1.beta", blk.ln1_beta);
    fn(prefix + "ln2.gamma", blk.ln2_gamma);
    fn(prefix + "ln2.beta", blk.ln2_beta);
  }
  fn("decoder.W1", p.decoder.W1);
  fn("decoder.b1", p.decoder.b1);
  fn("decoder.W2", p.decoder.W2);
  fn("decoder.b2", p.decoder.b2);
  fn("regressor.W1", p.regressor.W1);
  fn("regressor.b1", p.regressor.b1);
  fn("regressor.W2", p.regressor.W2);
  fn("regressor.b2", p.regressor.b2);
}

// Walks two shape-congruent parameter sets in lockstep (same order as
// for_each_tensor).
template <typename PA, typename PB, typename Fn>
void for_each_tensor_pair(PA& a, PB& b, Fn&& fn) {
  fn(a.embed_W, b.embed_W);
  fn(a.embed_b, b.embed_b);
  fn(a.pos, b.pos);
  fn(a.mask_token, b.mask_token);
  for (std::size_t i = 0; i < a.blocks.size(); ++i) {
    auto& x = a.blocks[i];
    auto& y = b.blocks[i];
    fn(x.Wq, y.Wq);
    fn(x.Wk, y.Wk);
    fn(x.Wv, y.Wv);
    fn(x.Wo, y.Wo);
    fn(x.mlp_W1, y.mlp_W1);
    fn(x.mlp_b1, y.mlp_b1);
    fn(x.mlp_W2, y.mlp_W2);
    fn(x.mlp_b2, y.mlp_b2);
    fn(x.ln1_gamma, y.ln1_gamma);
    fn(x.ln1_beta, y.ln1_beta);
    fn(x.ln2_gamma, y.ln2_gamma);
    fn(x.ln2_beta, y.ln2_beta);
  }
  fn(a.decoder.W1, b.decoder.W1);
  fn(a.decoder.b1, b.decoder.b1);
  fn(a.decoder.W2, b.decoder.W2);
  fn(a.decoder.b2, b.decoder.b2);
  fn(a.regressor.W1, b.regressor.W1);
  fn(a.regressor.b1, b.regressor.b1);
  fn(a.regressor.W2, b.regressor.W2);
  fn(a.regressor.b2, b.regressor.b2);
}

// Shape-allocates a zero-filled parameter set for the geometry.
ModelParams allocate_params(const ModelGeometry& geo);

// Weights uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases zero,
// norm scales one, shifts zero, mask token zero.
ModelParams init_params(const ModelGeometry& geo, std::uint64_t seed);
GradientBundle zero_grads(const ModelGeometry& geo);

// Masked token indices, |masked| = round(ratio*S), distinct, sorted.
struct MaskSpec {
  double ratio = 0.5;
  std::vector<int> masked;
};

MaskSpec sample_mask(int S, double ratio, Rng& rng);

struct ShrinkageParams {
  double a = 10.0;  // shrinkage speed
  double c = 0.2;   // residual threshold, normalized label scale
};

struct LossWeights {
  double lambda_pred = 1.0;  // weight of the prediction loss in the combined loss
};

// Masked embeddings are replaced by the mask token (after embedding, before
// the positional table is added); the decoder maps every output embedding
// back to d values.
Eigen::MatrixXd forward_recon(const ModelParams& params, const Eigen::MatrixXd& tokens,
                              const MaskSpec& mask);

// Unmasked pass; encoder output is mean-pooled over tokens, the regressor
// yields (sbp, dbp) on the normalized label scale.
Eigen::Vector2d forward_predict(const ModelParams& params, const Eigen::MatrixXd& tokens);

// Mean of squared errors over masked tokens' entries only (|masked|*d terms).
double masked_mse(const Eigen::MatrixXd& recon, const Eigen::MatrixXd& target,
                  const MaskSpec& mask);

// Per output j: l = |pred_j - target_j|, term = l^2 / (1 + exp(a*(c - l)));
// mean over the two outputs.
double shrinkage(const Eigen::Vector2d& pred, const Eigen::Vector2d& target,
                 const ShrinkageParams& sp);

double combined_loss(double recon_loss, double pred_loss, const LossWeights& w);

// One adaptation/training sample: tokens are on the normalized signal scale,
// the label (when present) on the normalized label scale.
struct TrainItem {
  Eigen::MatrixXd tokens;  // S x d
  std::optional<Eigen::Vector2d> label;
  MaskSpec mask;
};

// Batch loss = mean over items of [masked_mse + lambda_pred * shrinkage if
// labeled]. The reconstruction pass runs on masked input, the prediction
// pass on unmasked input. Gradients are exact reverse-mode derivatives of
// the batch loss with respect to every parameter tensor.
std::pair<GradientBundle, double> backward(const ModelParams& params,
                                           const std::vector<TrainItem>& batch,
                                           const LossWeights& w,
                                           const ShrinkageParams& sp);

// Supervision-only batch: mean shrinkage over items, no reconstruction term.
std::pair<GradientBundle, double> backward_supervised(
    const ModelParams& params, const std::vector<TrainItem>& batch,
    const ShrinkageParams& sp);

// Forward-only loss evaluation, same reduction rules as backward /
// backward_supervised.
double batch_loss(const ModelParams& params, const std::vector<TrainItem>& batch,
                  const LossWeights& w, const ShrinkageParams& sp);
double supervised_batch_loss(const ModelParams& params,
                             const std::vector<TrainItem>& batch,
                             const ShrinkageParams& sp);

// p <- p - lr*g elementwise. lr = 0 is a no-op (degenerate runs use it).
void sgd_step(ModelParams& params, const GradientBundle& grads, double lr);

struct PretrainConfig {
  int epochs = 200;
  int batch_size = 32;
  double lr_ssl = 1e-2;
  double lr_sl = 1e-2;
  double mask_ratio = 0.5;
};

struct PretrainReport {
  double final_recon_loss = 0.0;
  double final_pred_loss = 0.0;
};

// Sequential SSL -> SL updates per batch: one SGD step on masked
// reconstruction MSE at lr_ssl, then one on shrinkage at lr_sl.
// All source events must be labeled and already normalized.
ModelParams pretrain(ModelParams params, const std::vector<SubjectStream>& source,
                     const PretrainConfig& cfg, std::uint64_t seed,
                     PretrainReport* report = nullptr);

// Versioned binary checkpoint: geometry, normalization stats, named tensors.
// Round-trips bit-exactly at 64-bit precision.
struct Checkpoint {
  ModelParams params;
  NormStats stats;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ottabp
