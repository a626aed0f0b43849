#include "ottabp/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace ottabp {

namespace {

constexpr double kLnEps = 1e-5;
constexpr std::uint32_t kCheckpointMagic = 0x4f544250u;  // "OTBP"
constexpr std::uint32_t kCheckpointVersion = 1u;

double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440));
}

double gelu_deriv(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
  const double pdf = 0.39894228040143267794 * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void init_uniform(Eigen::MatrixXd& m, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = dist(rng);
}

// Per-pass caches; reused across items so the hot loop never allocates.
struct BlockCache {
  Eigen::MatrixXd xhat1, N1, Q, K, V, A, Ctx, xhat2, N2, M1, G;
  Eigen::VectorXd rstd1, rstd2;

  void resize(int S, int h) {
    xhat1.resize(S, h);
    N1.resize(S, h);
    Q.resize(S, h);
    K.resize(S, h);
    V.resize(S, h);
    A.resize(S, S);
    Ctx.resize(S, h);
    xhat2.resize(S, h);
    N2.resize(S, h);
    M1.resize(S, 4 * h);
    G.resize(S, 4 * h);
    rstd1.resize(S);
    rstd2.resize(S);
  }
};

struct Workspace {
  explicit Workspace(const ModelGeometry& geo) {
    const int S = geo.S, h = geo.h, d = geo.d;
    H.resize(S, h);
    dH.resize(S, h);
    dX.resize(S, h);
    dN.resize(S, h);
    tmpSh.resize(S, h);
    dQ.resize(S, h);
    dK.resize(S, h);
    dV.resize(S, h);
    dCtx.resize(S, h);
    dA.resize(S, S);
    dM1.resize(S, 4 * h);
    dG.resize(S, 4 * h);
    D1.resize(S, h);
    Dg.resize(S, h);
    R.resize(S, d);
    dR.resize(S, d);
    zbar.resize(1, h);
    P1.resize(1, h);
    Pg.resize(1, h);
    dP1.resize(1, h);
    dPg.resize(1, h);
    dzbar.resize(1, h);
    rowtmp.resize(1, h);
    y.resize(1, 2);
    dy.resize(1, 2);
    blocks.resize(static_cast<std::size_t>(geo.E));
    for (auto& b : blocks) b.resize(S, h);
  }

  Eigen::MatrixXd H, dH, dX, dN, tmpSh;
  Eigen::MatrixXd dQ, dK, dV, dCtx, dA, dM1, dG;
  Eigen::MatrixXd D1, Dg, R, dR;
  Eigen::MatrixXd zbar, P1, Pg, dP1, dPg, dzbar, rowtmp, y, dy;
  std::vector<BlockCache> blocks;
};

void ln_forward(const Eigen::MatrixXd& X, const Eigen::MatrixXd& gamma,
                const Eigen::MatrixXd& beta, Eigen::MatrixXd& xhat,
                Eigen::VectorXd& rstd, Eigen::MatrixXd& N) {
  const Eigen::Index S = X.rows(), h = X.cols();
  for (Eigen::Index r = 0; r < S; ++r) {
    const double mu = X.row(r).mean();
    double var = 0.0;
    for (Eigen::Index c = 0; c < h; ++c) {
      const double d = X(r, c) - mu;
      var += d * d;
    }
    var /= static_cast<double>(h);
    const double rs = 1.0 / std::sqrt(var + kLnEps);
    rstd[r] = rs;
    for (Eigen::Index c = 0; c < h; ++c) {
      const double xh = (X(r, c) - mu) * rs;
      xhat(r, c) = xh;
      N(r, c) = xh * gamma(0, c) + beta(0, c);
    }
  }
}

// Adds the input-gradient of the layer norm to dX and accumulates the
// gamma/beta gradients.
void ln_backward(const Eigen::MatrixXd& dNout, const Eigen::MatrixXd& xhat,
                 const Eigen::VectorXd& rstd, const Eigen::MatrixXd& gamma,
                 Eigen::MatrixXd& g_gamma, Eigen::MatrixXd& g_beta,
                 Eigen::MatrixXd& dX_accum) {
  const Eigen::Index S = dNout.rows(), h = dNout.cols();
  const double inv_h = 1.0 / static_cast<double>(h);
  for (Eigen::Index r = 0; r < S; ++r) {
    double m1 = 0.0, m2 = 0.0;
    for (Eigen::Index c = 0; c < h; ++c) {
      const double dn = dNout(r, c);
      g_gamma(0, c) += dn * xhat(r, c);
      g_beta(0, c) += dn;
      const double dxh = dn * gamma(0, c);
      m1 += dxh;
      m2 += dxh * xhat(r, c);
    }
    m1 *= inv_h;
    m2 *= inv_h;
    const double rs = rstd[r];
    for (Eigen::Index c = 0; c < h; ++c) {
      const double dxh = dNout(r, c) * gamma(0, c);
      dX_accum(r, c) += rs * (dxh - m1 - xhat(r, c) * m2);
    }
  }
}

void softmax_rows_inplace(Eigen::MatrixXd& A) {
  for (Eigen::Index r = 0; r < A.rows(); ++r) {
    const double mx = A.row(r).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index c = 0; c < A.cols(); ++c) {
      const double e = std::exp(A(r, c) - mx);
      A(r, c) = e;
      sum += e;
    }
    A.row(r) /= sum;
  }
}

// dA (holding dL/dA) is rewritten in place to dL/dScores.
void softmax_backward_inplace(Eigen::MatrixXd& dA, const Eigen::MatrixXd& A) {
  for (Eigen::Index r = 0; r < A.rows(); ++r) {
    const double s = dA.row(r).dot(A.row(r));
    dA.row(r) = A.row(r).cwiseProduct((dA.row(r).array() - s).matrix());
  }
}

void check_tokens(const ModelParams& p, const Eigen::MatrixXd& tokens) {
  if (tokens.rows() != p.geo.S || tokens.cols() != p.geo.d)
    throw std::invalid_argument(
        "token matrix shape " + std::to_string(tokens.rows()) + "x" +
        std::to_string(tokens.cols()) + " does not match model geometry " +
        std::to_string(p.geo.S) + "x" + std::to_string(p.geo.d));
}

void check_mask(const MaskSpec& mask, int S, bool require_nonempty) {
  if (require_nonempty && mask.masked.empty())
    throw std::invalid_argument("mask must cover at least one token");
  for (int i : mask.masked)
    if (i < 0 || i >= S)
      throw std::invalid_argument("mask index " + std::to_string(i) + " out of range");
}

// Runs the encoder; ws.H holds the final embeddings Z afterwards.
void encoder_forward(const ModelParams& p, const Eigen::MatrixXd& tokens,
                     const MaskSpec* mask, Workspace& ws) {
  ws.H.noalias() = tokens * p.embed_W;
  ws.H.rowwise() += p.embed_b.row(0);
  if (mask)
    for (int i : mask->masked) ws.H.row(i) = p.mask_token.row(0);
  ws.H += p.pos;

  const double inv_s = 1.0 / std::sqrt(static_cast<double>(p.geo.h));
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    const EncoderBlock& blk = p.blocks[b];
    BlockCache& c = ws.blocks[b];
    ln_forward(ws.H, blk.ln1_gamma, blk.ln1_beta, c.xhat1, c.rstd1, c.N1);
    c.Q.noalias() = c.N1 * blk.Wq;
    c.K.noalias() = c.N1 * blk.Wk;
    c.V.noalias() = c.N1 * blk.Wv;
    c.A.noalias() = c.Q * c.K.transpose();
    c.A *= inv_s;
    softmax_rows_inplace(c.A);
    c.Ctx.noalias() = c.A * c.V;
    ws.tmpSh.noalias() = c.Ctx * blk.Wo;
    ws.H += ws.tmpSh;
    ln_forward(ws.H, blk.ln2_gamma, blk.ln2_beta, c.xhat2, c.rstd2, c.N2);
    c.M1.noalias() = c.N2 * blk.mlp_W1;
    c.M1.rowwise() += blk.mlp_b1.row(0);
    c.G = c.M1.unaryExpr(&gelu_scalar);
    ws.tmpSh.noalias() = c.G * blk.mlp_W2;
    ws.tmpSh.rowwise() += blk.mlp_b2.row(0);
    ws.H += ws.tmpSh;
  }
}

// Consumes ws.dH (gradient at the encoder output) and accumulates parameter
// gradients; afterwards routes the embedding-level gradient into pos,
// mask_token, and the embedding layer.
void encoder_backward(const ModelParams& p, const Eigen::MatrixXd& tokens,
                      const MaskSpec* mask, GradientBundle& g, Workspace& ws) {
  const double inv_s = 1.0 / std::sqrt(static_cast<double>(p.geo.h));
  for (std::size_t bi = p.blocks.size(); bi-- > 0;) {
    const EncoderBlock& blk = p.blocks[bi];
    EncoderBlock& gb = g.blocks[bi];
    BlockCache& c = ws.blocks[bi];

    // MLP sub-layer
    gb.mlp_b2.row(0) += ws.dH.colwise().sum();
    gb.mlp_W2.noalias() += c.G.transpose() * ws.dH;
    ws.dG.noalias() = ws.dH * blk.mlp_W2.transpose();
    ws.dM1 = ws.dG.cwiseProduct(c.M1.unaryExpr(&gelu_deriv));
    gb.mlp_W1.noalias() += c.N2.transpose() * ws.dM1;
    gb.mlp_b1.row(0) += ws.dM1.colwise().sum();
    ws.dN.noalias() = ws.dM1 * blk.mlp_W1.transpose();
    ws.dX.setZero();
    ln_backward(ws.dN, c.xhat2, c.rstd2, blk.ln2_gamma, gb.ln2_gamma, gb.ln2_beta, ws.dX);
    ws.dH += ws.dX;

    // attention sub-layer
    gb.Wo.noalias() += c.Ctx.transpose() * ws.dH;
    ws.dCtx.noalias() = ws.dH * blk.Wo.transpose();
    ws.dA.noalias() = ws.dCtx * c.V.transpose();
    ws.dV.noalias() = c.A.transpose() * ws.dCtx;
    softmax_backward_inplace(ws.dA, c.A);
    ws.dA *= inv_s;
    ws.dQ.noalias() = ws.dA * c.K;
    ws.dK.noalias() = ws.dA.transpose() * c.Q;
    gb.Wq.noalias() += c.N1.transpose() * ws.dQ;
    gb.Wk.noalias() += c.N1.transpose() * ws.dK;
    gb.Wv.noalias() += c.N1.transpose() * ws.dV;
    ws.dN.noalias() = ws.dQ * blk.Wq.transpose();
    ws.dN.noalias() += ws.dK * blk.Wk.transpose();
    ws.dN.noalias() += ws.dV * blk.Wv.transpose();
    ws.dX.setZero();
    ln_backward(ws.dN, c.xhat1, c.rstd1, blk.ln1_gamma, gb.ln1_gamma, gb.ln1_beta, ws.dX);
    ws.dH += ws.dX;
  }

  g.pos += ws.dH;
  if (mask && !mask->masked.empty()) {
    std::vector<bool> is_masked(static_cast<std::size_t>(p.geo.S), false);
    for (int i : mask->masked) is_masked[static_cast<std::size_t>(i)] = true;
    for (int r = 0; r < p.geo.S; ++r) {
      if (is_masked[static_cast<std::size_t>(r)]) {
        g.mask_token.row(0) += ws.dH.row(r);
      } else {
        g.embed_W.noalias() += tokens.row(r).transpose() * ws.dH.row(r);
        g.embed_b.row(0) += ws.dH.row(r);
      }
    }
  } else {
    g.embed_W.noalias() += tokens.transpose() * ws.dH;
    g.embed_b.row(0) += ws.dH.colwise().sum();
  }
}

void decoder_forward(const ModelParams& p, Workspace& ws) {
  ws.D1.noalias() = ws.H * p.decoder.W1;
  ws.D1.rowwise() += p.decoder.b1.row(0);
  ws.Dg = ws.D1.unaryExpr(&gelu_scalar);
  ws.R.noalias() = ws.Dg * p.decoder.W2;
  ws.R.rowwise() += p.decoder.b2.row(0);
}

// ws.dR -> parameter grads; leaves ws.dH = gradient at the encoder output.
void decoder_backward(const ModelParams& p, GradientBundle& g, Workspace& ws) {
  g.decoder.W2.noalias() += ws.Dg.transpose() * ws.dR;
  g.decoder.b2.row(0) += ws.dR.colwise().sum();
  ws.tmpSh.noalias() = ws.dR * p.decoder.W2.transpose();
  ws.tmpSh = ws.tmpSh.cwiseProduct(ws.D1.unaryExpr(&gelu_deriv));
  g.decoder.W1.noalias() += ws.H.transpose() * ws.tmpSh;
  g.decoder.b1.row(0) += ws.tmpSh.colwise().sum();
  ws.dH.noalias() = ws.tmpSh * p.decoder.W1.transpose();
}

void regressor_forward(const ModelParams& p, Workspace& ws) {
  ws.zbar = ws.H.colwise().mean();
  ws.P1.noalias() = ws.zbar * p.regressor.W1;
  ws.P1 += p.regressor.b1;
  ws.Pg = ws.P1.unaryExpr(&gelu_scalar);
  ws.y.noalias() = ws.Pg * p.regressor.W2;
  ws.y += p.regressor.b2;
}

// ws.dy -> parameter grads; leaves ws.dH = gradient at the encoder output.
void regressor_backward(const ModelParams& p, GradientBundle& g, Workspace& ws) {
  g.regressor.W2.noalias() += ws.Pg.transpose() * ws.dy;
  g.regressor.b2 += ws.dy;
  ws.dPg.noalias() = ws.dy * p.regressor.W2.transpose();
  ws.dP1 = ws.dPg.cwiseProduct(ws.P1.unaryExpr(&gelu_deriv));
  g.regressor.W1.noalias() += ws.zbar.transpose() * ws.dP1;
  g.regressor.b1 += ws.dP1;
  ws.dzbar.noalias() = ws.dP1 * p.regressor.W1.transpose();
  const double inv_S = 1.0 / static_cast<double>(p.geo.S);
  for (int r = 0; r < p.geo.S; ++r) ws.dH.row(r) = ws.dzbar.row(0) * inv_S;
}

double shrinkage_term(double l, const ShrinkageParams& sp) {
  return l * l * stable_sigmoid(sp.a * (l - sp.c));
}

double shrinkage_term_deriv(double l, const ShrinkageParams& sp) {
  const double sig = stable_sigmoid(sp.a * (l - sp.c));
  return 2.0 * l * sig + l * l * sp.a * sig * (1.0 - sig);
}

// Reconstruction pass for one item; returns the unweighted masked MSE.
double recon_pass(const ModelParams& p, const Eigen::MatrixXd& tokens,
                  const MaskSpec& mask, double grad_weight, GradientBundle* g,
                  Workspace& ws) {
  encoder_forward(p, tokens, &mask, ws);
  decoder_forward(p, ws);
  const auto m = static_cast<double>(mask.masked.size());
  const double denom = m * static_cast<double>(p.geo.d);
  double loss = 0.0;
  for (int i : mask.masked) loss += (ws.R.row(i) - tokens.row(i)).squaredNorm();
  loss /= denom;
  if (g) {
    ws.dR.setZero();
    const double scale = 2.0 * grad_weight / denom;
    for (int i : mask.masked) ws.dR.row(i) = scale * (ws.R.row(i) - tokens.row(i));
    decoder_backward(p, *g, ws);
    encoder_backward(p, tokens, &mask, *g, ws);
  }
  return loss;
}

// Prediction pass for one item; returns the unweighted shrinkage loss.
double predict_pass(const ModelParams& p, const Eigen::MatrixXd& tokens,
                    const Eigen::Vector2d& label, const ShrinkageParams& sp,
                    double grad_weight, GradientBundle* g, Workspace& ws) {
  encoder_forward(p, tokens, nullptr, ws);
  regressor_forward(p, ws);
  double loss = 0.0;
  for (int j = 0; j < 2; ++j) {
    const double e = ws.y(0, j) - label[j];
    const double l = std::abs(e);
    loss += shrinkage_term(l, sp);
    if (g) {
      const double sign = e > 0.0 ? 1.0 : (e < 0.0 ? -1.0 : 0.0);
      ws.dy(0, j) = grad_weight * 0.5 * shrinkage_term_deriv(l, sp) * sign;
    }
  }
  loss *= 0.5;
  if (g) {
    regressor_backward(p, *g, ws);
    encoder_backward(p, tokens, nullptr, *g, ws);
  }
  return loss;
}

}  // namespace

void ModelGeometry::validate() const {
  if (d < 1 || h < 1 || S < 1 || E < 1)
    throw ConfigError("model geometry fields d,h,S,E must all be positive");
}

ModelParams allocate_params(const ModelGeometry& geo) {
  geo.validate();
  ModelParams p;
  p.geo = geo;
  p.embed_W = Eigen::MatrixXd::Zero(geo.d, geo.h);
  p.embed_b = Eigen::MatrixXd::Zero(1, geo.h);
  p.pos = Eigen::MatrixXd::Zero(geo.S, geo.h);
  p.mask_token = Eigen::MatrixXd::Zero(1, geo.h);
  p.blocks.resize(static_cast<std::size_t>(geo.E));
  for (auto& b : p.blocks) {
    b.Wq = Eigen::MatrixXd::Zero(geo.h, geo.h);
    b.Wk = Eigen::MatrixXd::Zero(geo.h, geo.h);
    b.Wv = Eigen::MatrixXd::Zero(geo.h, geo.h);
    b.Wo = Eigen::MatrixXd::Zero(geo.h, geo.h);
    b.mlp_W1 = Eigen::MatrixXd::Zero(geo.h, 4 * geo.h);
    b.mlp_b1 = Eigen::MatrixXd::Zero(1, 4 * geo.h);
    b.mlp_W2 = Eigen::MatrixXd::Zero(4 * geo.h, geo.h);
    b.mlp_b2 = Eigen::MatrixXd::Zero(1, geo.h);
    b.ln1_gamma = Eigen::MatrixXd::Zero(1, geo.h);
    b.ln1_beta = Eigen::MatrixXd::Zero(1, geo.h);
    b.ln2_gamma = Eigen::MatrixXd::Zero(1, geo.h);
    b.ln2_beta = Eigen::MatrixXd::Zero(1, geo.h);
  }
  p.decoder.W1 = Eigen::MatrixXd::Zero(geo.h, geo.h);
  p.decoder.b1 = Eigen::MatrixXd::Zero(1, geo.h);
  p.decoder.W2 = Eigen::MatrixXd::Zero(geo.h, geo.d);
  p.decoder.b2 = Eigen::MatrixXd::Zero(1, geo.d);
  p.regressor.W1 = Eigen::MatrixXd::Zero(geo.h, geo.h);
  p.regressor.b1 = Eigen::MatrixXd::Zero(1, geo.h);
  p.regressor.W2 = Eigen::MatrixXd::Zero(geo.h, 2);
  p.regressor.b2 = Eigen::MatrixXd::Zero(1, 2);
  return p;
}

GradientBundle zero_grads(const ModelGeometry& geo) { return allocate_params(geo); }

ModelParams init_params(const ModelGeometry& geo, std::uint64_t seed) {
  ModelParams p = allocate_params(geo);
  Rng rng(mix_seed(seed, 0x6d6f64656cull));  // "model"
  init_uniform(p.embed_W, geo.d, rng);
  init_uniform(p.pos, geo.h, rng);
  for (auto& b : p.blocks) {
    init_uniform(b.Wq, geo.h, rng);
    init_uniform(b.Wk, geo.h, rng);
    init_uniform(b.Wv, geo.h, rng);
    init_uniform(b.Wo, geo.h, rng);
    init_uniform(b.mlp_W1, geo.h, rng);
    init_uniform(b.mlp_W2, 4 * geo.h, rng);
    b.ln1_gamma.setOnes();
    b.ln2_gamma.setOnes();
  }
  init_uniform(p.decoder.W1, geo.h, rng);
  init_uniform(p.decoder.W2, geo.h, rng);
  init_uniform(p.regressor.W1, geo.h, rng);
  init_uniform(p.regressor.W2, geo.h, rng);
  return p;
}

MaskSpec sample_mask(int S, double ratio, Rng& rng) {
  if (!(ratio >= 0.0 && ratio <= 1.0))
    throw ConfigError("mask_ratio must be in [0, 1]");
  const int m = static_cast<int>(std::lround(ratio * static_cast<double>(S)));
  MaskSpec spec;
  spec.ratio = ratio;
  std::vector<int> idx(static_cast<std::size_t>(S));
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < m; ++i) {
    std::uniform_int_distribution<int> pick(i, S - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  spec.masked.assign(idx.begin(), idx.begin() + m);
  std::sort(spec.masked.begin(), spec.masked.end());
  return spec;
}

Eigen::MatrixXd forward_recon(const ModelParams& params, const Eigen::MatrixXd& tokens,
                              const MaskSpec& mask) {
  check_tokens(params, tokens);
  check_mask(mask, params.geo.S, false);
  Workspace ws(params.geo);
  encoder_forward(params, tokens, &mask, ws);
  decoder_forward(params, ws);
  return ws.R;
}

Eigen::Vector2d forward_predict(const ModelParams& params, const Eigen::MatrixXd& tokens) {
  check_tokens(params, tokens);
  Workspace ws(params.geo);
  encoder_forward(params, tokens, nullptr, ws);
  regressor_forward(params, ws);
  return {ws.y(0, 0), ws.y(0, 1)};
}

double masked_mse(const Eigen::MatrixXd& recon, const Eigen::MatrixXd& target,
                  const MaskSpec& mask) {
  if (recon.rows() != target.rows() || recon.cols() != target.cols())
    throw std::invalid_argument("masked_mse: shape mismatch");
  check_mask(mask, static_cast<int>(recon.rows()), true);
  double loss = 0.0;
  for (int i : mask.masked) loss += (recon.row(i) - target.row(i)).squaredNorm();
  return loss / (static_cast<double>(mask.masked.size()) *
                 static_cast<double>(recon.cols()));
}

double shrinkage(const Eigen::Vector2d& pred, const Eigen::Vector2d& target,
                 const ShrinkageParams& sp) {
  double loss = 0.0;
  for (int j = 0; j < 2; ++j) loss += shrinkage_term(std::abs(pred[j] - target[j]), sp);
  return 0.5 * loss;
}

double combined_loss(double recon_loss, double pred_loss, const LossWeights& w) {
  return recon_loss + w.lambda_pred * pred_loss;
}

std::pair<GradientBundle, double> backward(const ModelParams& params,
                                           const std::vector<TrainItem>& batch,
                                           const LossWeights& w,
                                           const ShrinkageParams& sp) {
  if (batch.empty()) throw std::invalid_argument("backward: empty batch");
  GradientBundle g = zero_grads(params.geo);
  Workspace ws(params.geo);
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const TrainItem& item = batch[i];
    check_tokens(params, item.tokens);
    check_mask(item.mask, params.geo.S, true);
    double item_loss = recon_pass(params, item.tokens, item.mask, inv_b, &g, ws);
    if (item.label && w.lambda_pred != 0.0)
      item_loss += w.lambda_pred * predict_pass(params, item.tokens, *item.label, sp,
                                                w.lambda_pred * inv_b, &g, ws);
    if (!std::isfinite(item_loss))
      throw NumericError("non-finite loss at batch item " + std::to_string(i));
    total += item_loss;
  }
  return {std::move(g), total * inv_b};
}

std::pair<GradientBundle, double> backward_supervised(
    const ModelParams& params, const std::vector<TrainItem>& batch,
    const ShrinkageParams& sp) {
  if (batch.empty()) throw std::invalid_argument("backward_supervised: empty batch");
  GradientBundle g = zero_grads(params.geo);
  Workspace ws(params.geo);
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const TrainItem& item = batch[i];
    check_tokens(params, item.tokens);
    if (!item.label)
      throw std::invalid_argument("backward_supervised: unlabeled item " + std::to_string(i));
    const double item_loss =
        predict_pass(params, item.tokens, *item.label, sp, inv_b, &g, ws);
    if (!std::isfinite(item_loss))
      throw NumericError("non-finite loss at batch item " + std::to_string(i));
    total += item_loss;
  }
  return {std::move(g), total * inv_b};
}

double batch_loss(const ModelParams& params, const std::vector<TrainItem>& batch,
                  const LossWeights& w, const ShrinkageParams& sp) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  Workspace ws(params.geo);
  double total = 0.0;
  for (const TrainItem& item : batch) {
    check_tokens(params, item.tokens);
    check_mask(item.mask, params.geo.S, true);
    double item_loss = recon_pass(params, item.tokens, item.mask, 0.0, nullptr, ws);
    if (item.label && w.lambda_pred != 0.0)
      item_loss +=
          w.lambda_pred * predict_pass(params, item.tokens, *item.label, sp, 0.0, nullptr, ws);
    total += item_loss;
  }
  return total / static_cast<double>(batch.size());
}

double supervised_batch_loss(const ModelParams& params, const std::vector<TrainItem>& batch,
                             const ShrinkageParams& sp) {
  if (batch.empty()) throw std::invalid_argument("supervised_batch_loss: empty batch");
  Workspace ws(params.geo);
  double total = 0.0;
  for (const TrainItem& item : batch) {
    check_tokens(params, item.tokens);
    if (!item.label) throw std::invalid_argument("supervised_batch_loss: unlabeled item");
    total += predict_pass(params, item.tokens, *item.label, sp, 0.0, nullptr, ws);
  }
  return total / static_cast<double>(batch.size());
}

void sgd_step(ModelParams& params, const GradientBundle& grads, double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr))
    throw std::invalid_argument("sgd_step: learning rate must be finite and >= 0");
  if (params.geo != grads.geo)
    throw std::invalid_argument("sgd_step: geometry mismatch");
  for_each_tensor_pair(params, grads, [&](Eigen::MatrixXd& t, const Eigen::MatrixXd& g) {
    if (g.rows() != t.rows() || g.cols() != t.cols())
      throw std::invalid_argument("sgd_step: gradient shape mismatch");
    t -= lr * g;
  });
}

ModelParams pretrain(ModelParams params, const std::vector<SubjectStream>& source,
                     const PretrainConfig& cfg, std::uint64_t seed,
                     PretrainReport* report) {
  if (cfg.batch_size < 1) throw ConfigError("pretrain.batch_size must be at least 1");
  if (cfg.epochs < 0) throw ConfigError("pretrain.epochs must be nonnegative");
  const int S = params.geo.S, d = params.geo.d;
  if (std::lround(cfg.mask_ratio * static_cast<double>(S)) < 1)
    throw ConfigError("pretrain.mask_ratio masks zero tokens at this geometry");

  std::vector<Eigen::MatrixXd> tokens;
  std::vector<Eigen::Vector2d> labels;
  for (const auto& stream : source) {
    for (const auto& [seg, label] : stream.init_labeled) {
      tokens.push_back(tokenize(seg.values, d));
      labels.emplace_back(label.sbp, label.dbp);
    }
    for (const auto& ev : stream.events) {
      if (!ev.label) throw ConfigError("pretrain: unlabeled event in source stream");
      tokens.push_back(tokenize(ev.segment.values, d));
      labels.emplace_back(ev.label->sbp, ev.label->dbp);
    }
  }
  if (tokens.empty()) throw ConfigError("pretrain: no source samples");
  for (const auto& t : tokens)
    if (t.rows() != S)
      throw ConfigError("pretrain: data window length does not match model geometry");

  Rng rng(mix_seed(seed, 0x70726572ull));  // pretraining stream
  std::vector<std::size_t> perm(tokens.size());
  std::iota(perm.begin(), perm.end(), 0);
  const ShrinkageParams sp;
  const LossWeights ssl_only{0.0};
  double recon_sum = 0.0, pred_sum = 0.0;
  long batches = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(perm.begin(), perm.end(), rng);
    const bool last_epoch = epoch == cfg.epochs - 1;
    if (last_epoch) {
      recon_sum = pred_sum = 0.0;
      batches = 0;
    }
    for (std::size_t start = 0; start < perm.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(perm.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<TrainItem> batch;
      batch.reserve(end - start);
      for (std::size_t k = start; k < end; ++k)
        batch.push_back(TrainItem{tokens[perm[k]], std::nullopt,
                                  sample_mask(S, cfg.mask_ratio, rng)});
      try {
        auto [g_ssl, recon] = backward(params, batch, ssl_only, sp);
        sgd_step(params, g_ssl, cfg.lr_ssl);
        for (std::size_t k = start; k < end; ++k)
          batch[k - start].label = labels[perm[k]];
        auto [g_sl, pred] = backward_supervised(params, batch, sp);
        sgd_step(params, g_sl, cfg.lr_sl);
        if (last_epoch) {
          recon_sum += recon;
          pred_sum += pred;
          ++batches;
        }
      } catch (const NumericError& e) {
        throw TrainingError("pretraining diverged at epoch " + std::to_string(epoch) +
                            ", batch " + std::to_string(start / static_cast<std::size_t>(cfg.batch_size)) +
                            ": " + e.what());
      }
    }
  }
  if (report && batches > 0) {
    report->final_recon_loss = recon_sum / static_cast<double>(batches);
    report->final_pred_loss = pred_sum / static_cast<double>(batches);
  }
  return params;
}

namespace {

template <typename T>
void write_raw(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ConfigError("corrupt checkpoint: unexpected end of file");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write checkpoint: " + path);
  write_raw(out, kCheckpointMagic);
  write_raw(out, kCheckpointVersion);
  write_raw(out, static_cast<std::int32_t>(ckpt.params.geo.d));
  write_raw(out, static_cast<std::int32_t>(ckpt.params.geo.h));
  write_raw(out, static_cast<std::int32_t>(ckpt.params.geo.S));
  write_raw(out, static_cast<std::int32_t>(ckpt.params.geo.E));
  write_raw(out, ckpt.stats.signal_mean);
  write_raw(out, ckpt.stats.signal_std);
  write_raw(out, ckpt.stats.sbp_mean);
  write_raw(out, ckpt.stats.sbp_std);
  write_raw(out, ckpt.stats.dbp_mean);
  write_raw(out, ckpt.stats.dbp_std);
  std::uint32_t count = 0;
  for_each_tensor(const_cast<ModelParams&>(ckpt.params),
                  [&](const std::string&, Eigen::MatrixXd&) { ++count; });
  write_raw(out, count);
  for_each_tensor(const_cast<ModelParams&>(ckpt.params),
                  [&](const std::string& name, Eigen::MatrixXd& t) {
                    write_raw(out, static_cast<std::uint32_t>(name.size()));
                    out.write(name.data(), static_cast<std::streamsize>(name.size()));
                    write_raw(out, static_cast<std::uint32_t>(t.rows()));
                    write_raw(out, static_cast<std::uint32_t>(t.cols()));
                    out.write(reinterpret_cast<const char*>(t.data()),
                              static_cast<std::streamsize>(sizeof(double)) * t.size());
                  });
  if (!out) throw ConfigError("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  if (read_raw<std::uint32_t>(in) != kCheckpointMagic)
    throw ConfigError("corrupt checkpoint: bad magic in " + path);
  if (read_raw<std::uint32_t>(in) != kCheckpointVersion)
    throw ConfigError("unsupported checkpoint version in " + path);
  ModelGeometry geo;
  geo.d = read_raw<std::int32_t>(in);
  geo.h = read_raw<std::int32_t>(in);
  geo.S = read_raw<std::int32_t>(in);
  geo.E = read_raw<std::int32_t>(in);
  geo.validate();
  Checkpoint ckpt;
  ckpt.stats.signal_mean = read_raw<double>(in);
  ckpt.stats.signal_std = read_raw<double>(in);
  ckpt.stats.sbp_mean = read_raw<double>(in);
  ckpt.stats.sbp_std = read_raw<double>(in);
  ckpt.stats.dbp_mean = read_raw<double>(in);
  ckpt.stats.dbp_std = read_raw<double>(in);
  ckpt.params = allocate_params(geo);
  std::uint32_t expected = 0;
  for_each_tensor(ckpt.params, [&](const std::string&, Eigen::MatrixXd&) { ++expected; });
  if (read_raw<std::uint32_t>(in) != expected)
    throw ConfigError("corrupt checkpoint: wrong tensor count in " + path);
  for_each_tensor(ckpt.params, [&](const std::string& name, Eigen::MatrixXd& t) {
    const auto name_len = read_raw<std::uint32_t>(in);
    std::string got(name_len, '\0');
    in.read(got.data(), name_len);
    if (!in || got != name)
      throw ConfigError("corrupt checkpoint: expected tensor " + name + " in " + path);
    const auto rows = read_raw<std::uint32_t>(in);
    const auto cols = read_raw<std::uint32_t>(in);
    if (rows != static_cast<std::uint32_t>(t.rows()) ||
        cols != static_cast<std::uint32_t>(t.cols()))
      throw ConfigError("corrupt checkpoint: shape mismatch for " + name + " in " + path);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(sizeof(double)) * t.size());
    if (!in) throw ConfigError("corrupt checkpoint: unexpected end of file in " + path);
  });
  return ckpt;
}

}  // namespace ottabp
