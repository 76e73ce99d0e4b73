#include "microtune/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace microtune::autodiff {

using linalg::matmul;
using linalg::matmul_a_bt;
using linalg::matmul_at_b;

namespace {

void add_into(Matrix& dst, const Matrix& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
}

Matrix* ln_slot(GradientBundle* g, const std::string& name, std::size_t d) {
  return g ? &g->slot(name, 1, d) : nullptr;
}

// y = gamma * xhat + beta, per row.
Matrix layer_norm_backward(const Matrix& dy, const encoder::LayerNormCache& cache, const encoder::LayerNormParams& p,
                           Matrix* dgamma, Matrix* dbeta) {
  const std::size_t d = dy.cols();
  Matrix dx(dy.rows(), d);
  Vec g(d);
  for (std::size_t r = 0; r < dy.rows(); ++r) {
    double mean_g = 0.0;
    double mean_gx = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double xhat = cache.xhat(r, j);
      g[j] = dy(r, j) * p.gamma(0, j);
      mean_g += g[j];
      mean_gx += g[j] * xhat;
      if (dgamma) (*dgamma)(0, j) += dy(r, j) * xhat;
      if (dbeta) (*dbeta)(0, j) += dy(r, j);
    }
    mean_g /= static_cast<double>(d);
    mean_gx /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) dx(r, j) = cache.rstd[r] * (g[j] - mean_g - cache.xhat(r, j) * mean_gx);
  }
  return dx;
}

// out = gelu(u W1 + b1) W2 + b2; returns d/du. Weights are frozen.
Matrix mlp_backward(const Matrix& dout, const Matrix& pre, const encoder::LayerWeights& lw) {
  Matrix dpre = matmul_a_bt(dout, lw.w2);
  for (std::size_t i = 0; i < dpre.size(); ++i) dpre.data()[i] *= encoder::gelu_grad(pre.data()[i]);
  return matmul_a_bt(dpre, lw.w1);
}

// Backward of one pre-LN block; returns d/d(block input), all rows.
Matrix block_backward(const Matrix& dout, const encoder::LayerTape& t, const encoder::LayerWeights& lw,
                      GradientBundle* g, const std::string& prefix) {
  const std::size_t d = t.input.cols();
  const std::size_t rows = t.mid.rows();

  Matrix dmid = dout;
  add_into(dmid, layer_norm_backward(mlp_backward(dout, t.pre, lw), t.ln2, lw.ln2,
                                     ln_slot(g, prefix + "ln2.gamma", d), ln_slot(g, prefix + "ln2.beta", d)));

  Matrix dx(t.input.rows(), d);
  for (std::size_t r = 0; r < rows; ++r) linalg::axpy(1.0, dmid.row(r), dx.row(r));

  const Matrix dmixed = matmul_a_bt(dmid, lw.wo);
  const Matrix dprobs = matmul_a_bt(dmixed, t.v);
  const Matrix dv = matmul_at_b(t.probs, dmixed);

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix ds(rows, t.probs.cols());
  for (std::size_t r = 0; r < rows; ++r) {
    const double inner = linalg::dot(dprobs.row(r), t.probs.row(r));
    for (std::size_t j = 0; j < ds.cols(); ++j) ds(r, j) = t.probs(r, j) * (dprobs(r, j) - inner) * inv_sqrt_d;
  }
  const Matrix dq = matmul(ds, t.k);
  const Matrix dk = matmul_at_b(ds, t.q);

  Matrix da = matmul_a_bt(dk, lw.wk);
  add_into(da, matmul_a_bt(dv, lw.wv));
  const Matrix daq = matmul_a_bt(dq, lw.wq);
  for (std::size_t r = 0; r < rows; ++r) linalg::axpy(1.0, daq.row(r), da.row(r));

  add_into(dx, layer_norm_backward(da, t.ln1, lw.ln1, ln_slot(g, prefix + "ln1.gamma", d),
                                   ln_slot(g, prefix + "ln1.beta", d)));
  return dx;
}

ImageForward finish_forward(const Model& model, ImageForward fwd, const ForwardOptions& options,
                            const std::vector<std::size_t>* fixed_selection) {
  const auto& tf = fwd.features;
  if (fixed_selection) {
    if (fixed_selection->empty()) throw std::invalid_argument("forward: empty fixed selection");
    fwd.partition.selected = *fixed_selection;
  } else {
    fwd.partition = saliency::ncut_bipartition(saliency::build_affinity(tf.v_patch, tf.grid_side, options.saliency),
                                               options.saliency);
  }
  fwd.partition.q_sal = saliency::saliency_query(fwd.partition, tf.v_patch);
  fwd.pool = tokenfusion::soap_pool(fwd.partition.q_sal, tf.v_patch, model.pool, &fwd.pool_tape);
  fwd.z_fg = encoder::project_shared(fwd.pool.v_fg, model.encoder);
  fwd.z_cls = encoder::project_shared(tf.v_cls, model.encoder);
  fwd.logits = tokenfusion::fused_logits(fwd.pool.v_fg, tf.v_cls, model.bank, model.encoder, options.fusion);
  return fwd;
}

}  // namespace

std::vector<std::pair<std::string, Matrix*>> Model::trainables(bool include_layer_norm) {
  std::vector<std::pair<std::string, Matrix*>> out;
  if (include_layer_norm) out = encoder.layer_norm_params();
  out.emplace_back("head.w_llm_star", &bank.w_llm_star);
  out.emplace_back("pool.wq", &pool.wq);
  out.emplace_back("pool.wk", &pool.wk);
  out.emplace_back("pool.wv", &pool.wv);
  out.emplace_back("pool.empty_token", &pool.empty_token);
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> Model::trainables(bool include_layer_norm) const {
  std::vector<std::pair<std::string, const Matrix*>> out;
  for (auto& [name, ptr] : const_cast<Model*>(this)->trainables(include_layer_norm)) out.emplace_back(name, ptr);
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> Model::frozen() const {
  auto out = encoder.frozen_params();
  out.emplace_back("head.w_llm", &bank.w_llm);
  return out;
}

double Model::frozen_checksum() const {
  double acc = 0.0;
  for (const auto& [name, m] : frozen()) acc = std::fmod(acc * 31.0 + linalg::checksum(*m), 9007199254740881.0);
  return acc;
}

Matrix& GradientBundle::slot(const std::string& name, std::size_t rows, std::size_t cols) {
  auto [it, inserted] = grads_.try_emplace(name, rows, cols);
  if (!inserted && (it->second.rows() != rows || it->second.cols() != cols))
    throw std::invalid_argument("GradientBundle: shape mismatch for " + name);
  return it->second;
}

const Matrix* GradientBundle::find(const std::string& name) const {
  auto it = grads_.find(name);
  return it == grads_.end() ? nullptr : &it->second;
}

void GradientBundle::add(const GradientBundle& other) {
  for (const auto& [name, m] : other.grads_) add_into(slot(name, m.rows(), m.cols()), m);
}

void GradientBundle::scale(double s) {
  for (auto& [name, m] : grads_)
    for (double& x : m.data()) x *= s;
}

void GradientBundle::check_finite() const {
  for (const auto& [name, m] : grads_)
    if (!m.all_finite()) throw linalg::NumericError("non-finite gradient in " + name);
}

GradientBundle half_squared_norm_gradient(const std::string& name, const Matrix& w) {
  GradientBundle g;
  g.slot(name, w.rows(), w.cols()) = w;
  return g;
}

ImageForward forward_image(const Model& model, const Image& image, const ForwardOptions& options,
                           const std::vector<std::size_t>* fixed_selection) {
  ImageForward fwd;
  fwd.has_encoder_tape = true;
  fwd.features = encoder::forward_features(image, model.encoder, &fwd.tape);
  return finish_forward(model, std::move(fwd), options, fixed_selection);
}

ImageForward forward_tokens(const Model& model, encoder::TokenFeatures features, const ForwardOptions& options,
                            const std::vector<std::size_t>* fixed_selection) {
  ImageForward fwd;
  fwd.features = std::move(features);
  return finish_forward(model, std::move(fwd), options, fixed_selection);
}

BatchLoss batch_loss(const Matrix& fused, std::span<const std::size_t> labels, const LossOptions& options) {
  const std::size_t B = fused.rows();
  const std::size_t C = fused.cols();
  if (B == 0 || labels.size() != B) throw std::invalid_argument("batch_loss: label count mismatch");
  Matrix scaled = fused;
  for (double& x : scaled.data()) x /= options.temperature;
  BatchLoss out;
  out.probs = linalg::row_softmax(scaled);
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] >= C) throw std::invalid_argument("batch_loss: label out of range");
    const double p = out.probs(b, labels[b]);
    if (p < options.clamp) ++out.clamped;
    out.loss_st -= std::log(std::max(p, options.clamp));
  }
  out.loss_st /= static_cast<double>(B);
  if (options.fairness) {
    for (std::size_t k = 0; k < C; ++k) {
      double mean = 0.0;
      for (std::size_t b = 0; b < B; ++b) mean += out.probs(b, k);
      mean /= static_cast<double>(B);
      if (mean < options.clamp) ++out.clamped;
      out.loss_reg -= std::log(std::max(mean, options.clamp));
    }
    out.loss_reg /= static_cast<double>(C);
  }
  out.total = out.loss_st + out.loss_reg;
  return out;
}

Matrix loss_gradient(const BatchLoss& loss, std::span<const std::size_t> labels, const LossOptions& options) {
  const Matrix& p = loss.probs;
  const std::size_t B = p.rows();
  const std::size_t C = p.cols();
  const double inv_b = 1.0 / static_cast<double>(B);
  Matrix dscaled(B, C);

  // Cross-entropy part, already in logit space: (p - onehot) / B. The label
  // entry p - 1 is summed from the other classes so it stays accurate when
  // the row is nearly one-hot.
  for (std::size_t b = 0; b < B; ++b) {
    if (p(b, labels[b]) < options.clamp) continue;
    double rest = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      if (c == labels[b]) continue;
      dscaled(b, c) = p(b, c) * inv_b;
      rest += p(b, c);
    }
    dscaled(b, labels[b]) = -rest * inv_b;
  }
  if (options.fairness) {
    Vec dpbar(C, 0.0);
    for (std::size_t k = 0; k < C; ++k) {
      double mean = 0.0;
      for (std::size_t b = 0; b < B; ++b) mean += p(b, k);
      mean *= inv_b;
      if (mean >= options.clamp) dpbar[k] = -1.0 / (static_cast<double>(C) * mean);
    }
    for (std::size_t b = 0; b < B; ++b) {
      // dL/dp_b = dpbar / B, pushed through the softmax Jacobian:
      // p_c (g_c - sum_k p_k g_k) = p_c sum_k p_k (g_c - g_k), which avoids
      // cancellation on saturated rows.
      for (std::size_t c = 0; c < C; ++c) {
        double centered = 0.0;
        for (std::size_t k = 0; k < C; ++k) centered += p(b, k) * (dpbar[c] - dpbar[k]);
        dscaled(b, c) += p(b, c) * centered * inv_b;
      }
    }
  }
  for (double& x : dscaled.data()) x /= options.temperature;
  return dscaled;
}

void cosine_logits_backward(std::span<const double> z, const Matrix& w, std::span<const double> dlogits,
                            std::span<double> dz, Matrix* dw) {
  const double nz = linalg::norm2(z);
  if (!(nz > 0.0)) throw linalg::NumericError("degenerate embedding");
  for (std::size_t c = 0; c < w.rows(); ++c) {
    const double g = dlogits[c];
    if (g == 0.0) continue;
    const auto wc = w.row(c);
    const double nw = linalg::norm2(wc);
    if (!(nw > 0.0)) throw linalg::NumericError("degenerate embedding");
    const double inv = 1.0 / (nz * nw);
    const double cosv = linalg::dot(z, wc) * inv;
    for (std::size_t j = 0; j < z.size(); ++j) dz[j] += g * (wc[j] * inv - cosv * z[j] / (nz * nz));
    if (dw) {
      auto row = dw->row(c);
      for (std::size_t j = 0; j < z.size(); ++j) row[j] += g * (z[j] * inv - cosv * wc[j] / (nw * nw));
    }
  }
}

void encoder_backward(const encoder::EncoderWeights& w, const encoder::EncoderTape& tape, const Matrix& dv_patch,
                      std::span<const double> dv_cls, GradientBundle& grads) {
  const std::size_t d = w.config.dim;
  const std::size_t L = w.layers.size();
  const auto& last = w.layers.back();

  const Matrix dcls = layer_norm_backward(Matrix::row_vector(dv_cls), tape.ln_post, w.ln_post,
                                          &grads.slot("encoder.ln_post.gamma", 1, d),
                                          &grads.slot("encoder.ln_post.beta", 1, d));
  Matrix dx = block_backward(dcls, tape.layers[L - 1], last, &grads, "encoder.layer" + std::to_string(L - 1) + ".");

  // v_patch = vt + MLP(vt), vt = x + x W_V [W_O]
  Matrix dvt = dv_patch;
  add_into(dvt, mlp_backward(dv_patch, tape.bypass.pre, last));
  Matrix dxv = w.config.bypass_output_proj ? matmul_a_bt(dvt, last.wo) : dvt;
  Matrix dpatch = matmul_a_bt(dxv, last.wv);
  add_into(dpatch, dvt);
  for (std::size_t i = 0; i < dpatch.rows(); ++i) linalg::axpy(1.0, dpatch.row(i), dx.row(i + 1));

  for (std::size_t l = L - 1; l-- > 0;)
    dx = block_backward(dx, tape.layers[l], w.layers[l], &grads, "encoder.layer" + std::to_string(l) + ".");
}

GradientBundle backward_image(const Model& model, const ImageForward& fwd, std::span<const double> dfused,
                              const ForwardOptions& options, bool train_layer_norm) {
  const std::size_t C = model.bank.classes();
  const std::size_t ds = model.bank.dim();
  const std::size_t d = model.pool.dim();
  if (dfused.size() != C) throw std::invalid_argument("backward_image: gradient length != class count");
  GradientBundle g;

  Vec dlocal(C, 0.0), dglobal(C, 0.0);
  switch (options.fusion) {
    case tokenfusion::FusionMode::kSymmetric:
      for (std::size_t c = 0; c < C; ++c) dlocal[c] = dglobal[c] = 0.5 * dfused[c];
      break;
    case tokenfusion::FusionMode::kGlobalOnly: dglobal.assign(dfused.begin(), dfused.end()); break;
    case tokenfusion::FusionMode::kLocalOnly: dlocal.assign(dfused.begin(), dfused.end()); break;
  }

  Matrix& dw_star = g.slot("head.w_llm_star", C, ds);
  Vec dz_fg(ds, 0.0), dz_cls(ds, 0.0);
  cosine_logits_backward(fwd.z_fg, model.bank.w_llm_star, dlocal, dz_fg, &dw_star);
  cosine_logits_backward(fwd.z_cls, model.bank.w_llm_star, dglobal, dz_cls, &dw_star);
  const Vec dv_fg = linalg::mat_vec(model.encoder.proj, dz_fg);
  const Vec dv_cls = linalg::mat_vec(model.encoder.proj, dz_cls);

  // Pooling: v_fg = a^T V, a = softmax(K q / sqrt(d)).
  const auto& t = fwd.pool_tape;
  const Vec& a = fwd.pool.attention;
  const std::size_t rows = t.keys_in.rows();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix dvalues(rows, d);
  Vec da(rows);
  for (std::size_t j = 0; j < rows; ++j) {
    linalg::axpy(a[j], dv_fg, dvalues.row(j));
    da[j] = linalg::dot(dv_fg, t.values.row(j));
  }
  const double inner = linalg::dot(a, da);
  Vec dscore(rows);
  for (std::size_t j = 0; j < rows; ++j) dscore[j] = a[j] * (da[j] - inner) * inv_sqrt_d;
  const Vec dquery = linalg::vec_mat(dscore, t.keys);
  Matrix dkeys(rows, d);
  for (std::size_t j = 0; j < rows; ++j) linalg::axpy(dscore[j], t.query, dkeys.row(j));

  g.slot("pool.wv", d, d) = matmul_at_b(t.keys_in, dvalues);
  g.slot("pool.wk", d, d) = matmul_at_b(t.keys_in, dkeys);
  Matrix& dwq = g.slot("pool.wq", d, d);
  for (std::size_t i = 0; i < d; ++i) linalg::axpy(t.q_sal[i], dquery, dwq.row(i));

  Matrix dkeys_in = matmul_a_bt(dvalues, model.pool.wv);
  add_into(dkeys_in, matmul_a_bt(dkeys, model.pool.wk));
  const std::size_t n = rows - 1;
  Matrix& dempty = g.slot("pool.empty_token", 1, d);
  std::copy(dkeys_in.row(n).begin(), dkeys_in.row(n).end(), dempty.row(0).begin());

  if (!(fwd.has_encoder_tape && train_layer_norm)) return g;

  Matrix dv_patch(n, d);
  std::copy(dkeys_in.data().begin(), dkeys_in.data().begin() + static_cast<std::ptrdiff_t>(n * d),
            dv_patch.data().begin());
  if (!options.detach_query) {
    const Vec dq_sal = linalg::mat_vec(model.pool.wq, dquery);
    const double inv = 1.0 / static_cast<double>(fwd.partition.selected.size());
    for (std::size_t i : fwd.partition.selected) linalg::axpy(inv, dq_sal, dv_patch.row(i));
  }
  encoder_backward(model.encoder, fwd.tape, dv_patch, dv_cls, g);
  return g;
}

}  // namespace microtune::autodiff
