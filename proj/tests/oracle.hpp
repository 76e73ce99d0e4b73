#pragma once

// Reference evaluations written directly from the formulas, in long double
// and with plain loops, sharing no code with the library kernels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "microtune/linalg.hpp"

namespace microtune::oracle {

using Real = long double;
using RVec = std::vector<Real>;
using RMat = std::vector<RVec>;

inline RMat to_real(const linalg::Matrix& m) {
  RMat out(m.rows(), RVec(m.cols()));
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
  return out;
}

inline RVec to_real(const std::vector<double>& v) { return RVec(v.begin(), v.end()); }

inline Real dot(const RVec& a, const RVec& b) {
  Real s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline Real cosine(const RVec& a, const RVec& b) { return dot(a, b) / std::sqrt(dot(a, a) * dot(b, b)); }

// v^T M
inline RVec row_times(const RVec& v, const RMat& m) {
  RVec out(m.empty() ? 0 : m[0].size(), 0);
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += v[i] * m[i][j];
  return out;
}

inline RVec softmax(const RVec& x) {
  RVec e(x.size());
  Real sum = 0;
  for (std::size_t i = 0; i < x.size(); ++i) sum += e[i] = std::exp(x[i]);
  for (auto& v : e) v /= sum;
  return e;
}

struct Pool {
  RVec v_fg;
  RVec attention;
};

// Attention pooling with the empty token appended as the last key/value row.
inline Pool soap_pool(const linalg::Vec& q_sal, const linalg::Matrix& v_patch, const linalg::Matrix& wq,
                      const linalg::Matrix& wk, const linalg::Matrix& wv, const linalg::Matrix& empty) {
  RMat rows = to_real(v_patch);
  rows.push_back(to_real(empty.data()));
  const RMat Wq = to_real(wq), Wk = to_real(wk), Wv = to_real(wv);
  const RVec q = row_times(to_real(q_sal), Wq);
  const Real d = static_cast<Real>(q_sal.size());
  RVec scores;
  for (const auto& r : rows) scores.push_back(dot(q, row_times(r, Wk)) / std::sqrt(d));
  Pool p;
  p.attention = softmax(scores);
  p.v_fg.assign(wv.cols(), 0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const RVec v = row_times(rows[i], Wv);
    for (std::size_t j = 0; j < v.size(); ++j) p.v_fg[j] += p.attention[i] * v[j];
  }
  return p;
}

inline RVec cosine_logits(const RVec& z, const linalg::Matrix& prototypes) {
  const RMat w = to_real(prototypes);
  RVec out;
  for (const auto& row : w) out.push_back(cosine(z, row));
  return out;
}

struct Fused {
  RVec local, global, fused;
};

inline Fused fused_logits(const RVec& v_fg, const RVec& v_cls, const linalg::Matrix& proj,
                          const linalg::Matrix& w_star) {
  const RMat P = to_real(proj);
  Fused f;
  f.local = cosine_logits(row_times(v_fg, P), w_star);
  f.global = cosine_logits(row_times(v_cls, P), w_star);
  for (std::size_t c = 0; c < f.local.size(); ++c) f.fused.push_back((f.local[c] + f.global[c]) / 2);
  return f;
}

inline Fused fused_logits(const linalg::Vec& v_fg, const linalg::Vec& v_cls, const linalg::Matrix& proj,
                          const linalg::Matrix& w_star) {
  return fused_logits(to_real(v_fg), to_real(v_cls), proj, w_star);
}

// Terms of the self-training loss: per row -log p(label) / B, then, when
// fairness is on, per class -log(batch-mean p) / C. Probabilities are
// softmax(logits / temperature) clamped from below before the log. Each term
// near zero is evaluated through log1p of the off-target mass, so differences
// of terms stay accurate on saturated rows.
inline RVec self_training_loss_terms(const RMat& logits, const std::vector<std::size_t>& labels, Real temperature,
                                     bool fairness, Real clamp) {
  const std::size_t B = logits.size(), C = logits[0].size();
  RMat scaled, probs;
  for (const auto& row : logits) {
    RVec s;
    for (Real x : row) s.push_back(x / temperature);
    Real mx = s[0];
    for (Real x : s) mx = std::max(mx, x);
    Real sum = 0;
    for (Real x : s) sum += std::exp(x - mx);
    const Real lse = mx + std::log(sum);
    RVec p;
    for (Real x : s) p.push_back(std::exp(x - lse));
    scaled.push_back(s);
    probs.push_back(p);
  }
  RVec terms;
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t l = labels[b];
    if (probs[b][l] < clamp) {
      terms.push_back(-std::log(clamp) / B);
      continue;
    }
    Real rest = 0;
    for (std::size_t c = 0; c < C; ++c)
      if (c != l) rest += std::exp(scaled[b][c] - scaled[b][l]);
    terms.push_back(std::log1p(rest) / B);
  }
  if (!fairness) return terms;
  for (std::size_t k = 0; k < C; ++k) {
    Real mean = 0, complement = 0;
    for (std::size_t b = 0; b < B; ++b) {
      mean += probs[b][k];
      for (std::size_t c = 0; c < C; ++c)
        if (c != k) complement += probs[b][c];
    }
    mean /= B;
    complement /= B;
    Real t;
    if (mean < clamp) t = -std::log(clamp);
    else if (mean > 0.5L) t = -std::log1p(-complement);
    else t = -std::log(mean);
    terms.push_back(t / C);
  }
  return terms;
}

inline RVec crop_weights(const linalg::Vec& f, const linalg::Matrix& crops) {
  const RVec g = to_real(f);
  RVec s;
  for (const auto& row : to_real(crops)) s.push_back(cosine(g, row));
  return softmax(s);
}

inline RVec aggregate(const linalg::Matrix& crops, const RVec& w) {
  RVec out(crops.cols(), 0);
  for (std::size_t i = 0; i < crops.rows(); ++i)
    for (std::size_t j = 0; j < crops.cols(); ++j) out[j] += w[i] * crops(i, j);
  return out;
}

struct Blend {
  RVec blended;
  std::size_t label = 0;
};

inline Blend blend(const linalg::Vec& p, const linalg::Vec& t, Real gamma) {
  Blend b;
  for (std::size_t c = 0; c < p.size(); ++c) b.blended.push_back(gamma * p[c] + (1 - gamma) * t[c]);
  for (std::size_t c = 1; c < b.blended.size(); ++c)
    if (b.blended[c] > b.blended[b.label]) b.label = c;
  return b;
}

}  // namespace microtune::oracle
