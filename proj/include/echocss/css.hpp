#pragma once

// Cyclical self-supervision loss over per-frame embedding sequences.
//
// Given a clip split into a template region P, a search region Q and a
// buffer region B, a template phase (s consecutive embeddings starting at p*)
// is softly matched against every phase starting in Q. The matching weights
// form an expected phase c frames further on, which is matched back against
// every phase starting in P. The loss is the cross-entropy of that second
// match against the index p* + c.
//
// All arithmetic is double precision. Indices are 0-based; the default
// partition P = 0..14, Q = 15..35, B = 36..39 is the 40-frame layout with
// 1-based frame ranges 1-15 / 16-36 / 37-40.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "echocss/error.hpp"
#include "echocss/rng.hpp"

namespace echocss::css {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Closed index interval [first, last].
struct IndexRange {
  std::size_t first = 0;
  std::size_t last = 0;

  std::size_t size() const { return last + 1 - first; }
  bool contains(std::size_t i) const { return i >= first && i <= last; }
  bool operator==(const IndexRange&) const = default;
};

/// Per-frame feature vectors of one clip: values is [T_clip x d].
struct EmbeddingSequence {
  Matrix values;
  std::vector<std::size_t> clip_indices;

  EmbeddingSequence() = default;
  explicit EmbeddingSequence(Matrix v) : values(std::move(v)) {
    clip_indices.resize(static_cast<std::size_t>(values.rows()));
    for (std::size_t i = 0; i < clip_indices.size(); ++i) clip_indices[i] = i;
  }
  EmbeddingSequence(Matrix v, std::vector<std::size_t> idx)
      : values(std::move(v)), clip_indices(std::move(idx)) {
    detail::require(clip_indices.size() == static_cast<std::size_t>(values.rows()),
                    "EmbeddingSequence: clip_indices length must equal row count");
  }

  std::size_t length() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(values.cols()); }

  bool all_finite() const { return values.allFinite(); }
};

/// s consecutive embeddings starting at `start`.
struct PhaseEmbedding {
  Matrix values;
  std::size_t start = 0;

  std::size_t length() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(values.cols()); }
};

/// Probability-weighted phase; each row is a convex combination of rows of
/// the source sequence.
struct SoftPhase {
  Matrix values;
};

enum class RegionTag { Template, Search };

/// Normalised matching weights over the start indices of one region.
struct MatchProfile {
  std::vector<double> weights;
  IndexRange region;
  RegionTag tag = RegionTag::Search;

  double at(std::size_t frame) const {
    if (!region.contains(frame)) throw IndexError("MatchProfile::at: frame outside region");
    return weights[frame - region.first];
  }
  std::size_t argmax() const {
    return region.first +
           static_cast<std::size_t>(std::max_element(weights.begin(), weights.end()) -
                                    weights.begin());
  }
};

struct CssConfig {
  std::size_t s = 3;
  std::size_t c = 2;
  double tau = 10.0;
  double w_css = 0.01;
  IndexRange pstar_range{0, 12};
};

struct RegionPartition {
  IndexRange template_region{0, 14};
  IndexRange search{15, 35};
  IndexRange buffer{36, 39};

  std::size_t clip_length() const { return buffer.last + 1; }

  /// Checks ordering, contiguity, the |P| < |Q| rule, and that every
  /// offset phase Q + c + s - 1 stays inside the clip.
  void validate(const CssConfig& cfg) const {
    detail::require(template_region.first <= template_region.last &&
                        search.first <= search.last && buffer.first <= buffer.last,
                    "RegionPartition: empty region");
    detail::require(template_region.last + 1 == search.first && search.last + 1 == buffer.first,
                    "RegionPartition: regions must be contiguous and ordered P < Q < B");
    detail::require(template_region.size() < search.size(),
                    "RegionPartition: template region must be shorter than search region");
    detail::require(cfg.s >= 1, "CssConfig: phase length s must be >= 1");
    detail::require(search.last + cfg.c + cfg.s - 1 <= buffer.last,
                    "RegionPartition: buffer too short: max(Q) + c + s - 1 = " +
                        std::to_string(search.last + cfg.c + cfg.s - 1) + " > max(B) = " +
                        std::to_string(buffer.last));
  }
};

inline void validate_config(const CssConfig& cfg, const RegionPartition& part) {
  part.validate(cfg);
  detail::require(cfg.tau > 0.0 && std::isfinite(cfg.tau), "CssConfig: tau must be positive");
  detail::require(cfg.w_css >= 0.0, "CssConfig: w_css must be non-negative");
  const auto& pr = cfg.pstar_range;
  const auto& p = part.template_region;
  detail::require(pr.first <= pr.last && p.contains(pr.first) && p.contains(pr.last),
                  "CssConfig: pstar_range must lie inside the template region");
  detail::require(pr.last + cfg.s - 1 <= p.last,
                  "CssConfig: template phase starting at max(pstar_range) leaves the template region");
  detail::require(pr.last + cfg.c <= p.last,
                  "CssConfig: target index p* + c must lie in the template region");
}

inline PhaseEmbedding phase_embedding(const EmbeddingSequence& seq, std::size_t t, std::size_t s) {
  detail::require(s >= 1, "phase_embedding: s must be >= 1");
  if (t + s - 1 >= seq.length()) {
    throw IndexError("phase_embedding: t + s - 1 = " + std::to_string(t + s - 1) +
                     " exceeds last clip index " + std::to_string(seq.length() - 1));
  }
  return {seq.values.middleRows(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(s)), t};
}

namespace internal {

// -(1/(d s)) * sum of squared row differences between a (s x d) block and
// rows [start, start+s) of seq.
inline double block_similarity(const Matrix& a, const Matrix& seq, std::size_t start) {
  const auto s = a.rows();
  const auto d = a.cols();
  double acc = 0.0;
  for (Eigen::Index k = 0; k < s; ++k) {
    const auto row = seq.row(static_cast<Eigen::Index>(start) + k);
    for (Eigen::Index j = 0; j < d; ++j) {
      const double diff = a(k, j) - row(j);
      acc += diff * diff;
    }
  }
  return -acc / static_cast<double>(d * s);
}

inline std::vector<double> softmax_scaled(const std::vector<double>& gamma, double tau) {
  std::vector<double> w(gamma.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (double g : gamma) {
    if (!std::isfinite(g)) throw NumericError("softmax: non-finite similarity value");
    mx = std::max(mx, g * tau);
  }
  double z = 0.0;
  for (std::size_t i = 0; i < gamma.size(); ++i) {
    w[i] = std::exp(gamma[i] * tau - mx);
    z += w[i];
  }
  for (auto& v : w) v /= z;
  return w;
}

inline void require_phase_fits(const EmbeddingSequence& seq, const IndexRange& region,
                               std::size_t s, const char* who) {
  echocss::detail::require(region.first <= region.last, std::string(who) + ": empty region");
  if (region.last + s - 1 >= seq.length()) {
    throw IndexError(std::string(who) + ": phase starting at " + std::to_string(region.last) +
                     " needs frame " + std::to_string(region.last + s - 1) +
                     " but clip has " + std::to_string(seq.length()) + " frames");
  }
}

}  // namespace internal

/// gamma(a, b) = -(1/(d s)) * sum_k ||a_k - b_k||^2. Always <= 0.
inline double phase_similarity(const PhaseEmbedding& a, const PhaseEmbedding& b) {
  echocss::detail::require(a.values.rows() == b.values.rows() && a.values.cols() == b.values.cols(),
                           "phase_similarity: phase shapes differ");
  echocss::detail::require(a.values.size() > 0, "phase_similarity: empty phase");
  return internal::block_similarity(a.values, b.values, 0);
}

/// Softmax over `region` of tau * gamma(template, E^q).
inline MatchProfile match_probabilities(const PhaseEmbedding& templ, const EmbeddingSequence& seq,
                                        const IndexRange& region, double tau) {
  const std::size_t s = templ.length();
  echocss::detail::require(templ.dim() == seq.dim(), "match_probabilities: dimension mismatch");
  internal::require_phase_fits(seq, region, s, "match_probabilities");
  std::vector<double> gamma(region.size());
  for (std::size_t q = region.first; q <= region.last; ++q) {
    gamma[q - region.first] = internal::block_similarity(templ.values, seq.values, q);
  }
  return {internal::softmax_scaled(gamma, tau), region, RegionTag::Search};
}

/// Row k of the result is sum_q alpha_q * z^{q + c + k}, k = 0..s-1.
inline SoftPhase soft_offset_phase(const EmbeddingSequence& seq, const MatchProfile& alpha,
                                   std::size_t c, std::size_t s) {
  echocss::detail::require(s >= 1, "soft_offset_phase: s must be >= 1");
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(s), seq.values.cols());
  for (std::size_t i = 0; i < alpha.weights.size(); ++i) {
    const double a = alpha.weights[i];
    if (a == 0.0) continue;
    const std::size_t q = alpha.region.first + i;
    if (q + c + s - 1 >= seq.length()) {
      throw IndexError("soft_offset_phase: offset phase at q = " + std::to_string(q) +
                       " needs frame " + std::to_string(q + c + s - 1) +
                       "; the buffer region must absorb c + s - 1 frames past the search region");
    }
    out.noalias() +=
        a * seq.values.middleRows(static_cast<Eigen::Index>(q + c), static_cast<Eigen::Index>(s));
  }
  return {std::move(out)};
}

/// Softmax over the template region of tau * gamma(soft, E^p). Phases that
/// start late in P may extend into Q.
inline MatchProfile template_match_probabilities(const SoftPhase& soft, const EmbeddingSequence& seq,
                                                 const IndexRange& template_region, double tau) {
  const std::size_t s = static_cast<std::size_t>(soft.values.rows());
  echocss::detail::require(static_cast<std::size_t>(soft.values.cols()) == seq.dim(),
                           "template_match_probabilities: dimension mismatch");
  internal::require_phase_fits(seq, template_region, s, "template_match_probabilities");
  std::vector<double> gamma(template_region.size());
  for (std::size_t p = template_region.first; p <= template_region.last; ++p) {
    gamma[p - template_region.first] = internal::block_similarity(soft.values, seq.values, p);
  }
  return {internal::softmax_scaled(gamma, tau), template_region, RegionTag::Template};
}

/// Intermediate quantities of the loss for one sequence.
struct CssTrace {
  std::size_t pstar = 0;
  MatchProfile alpha;
  SoftPhase soft;
  MatchProfile beta;
  double loss = 0.0;
};

inline CssTrace css_forward(const EmbeddingSequence& seq, const RegionPartition& part,
                            const CssConfig& cfg, std::size_t pstar) {
  validate_config(cfg, part);
  if (!cfg.pstar_range.contains(pstar)) {
    throw ContractError("css_loss: p* = " + std::to_string(pstar) + " outside pstar_range [" +
                        std::to_string(cfg.pstar_range.first) + ", " +
                        std::to_string(cfg.pstar_range.last) + "]");
  }
  if (seq.length() < part.clip_length()) {
    throw IndexError("css_loss: sequence has " + std::to_string(seq.length()) +
                     " frames, partition needs " + std::to_string(part.clip_length()));
  }
  if (!seq.all_finite()) throw NumericError("css_loss: embeddings contain NaN/Inf");
  CssTrace tr;
  tr.pstar = pstar;
  const auto templ = phase_embedding(seq, pstar, cfg.s);
  tr.alpha = match_probabilities(templ, seq, part.search, cfg.tau);
  tr.soft = soft_offset_phase(seq, tr.alpha, cfg.c, cfg.s);
  tr.beta = template_match_probabilities(tr.soft, seq, part.template_region, cfg.tau);
  const double target = tr.beta.at(pstar + cfg.c);
  tr.loss = -std::log(std::max(target, std::numeric_limits<double>::min()));
  return tr;
}

struct CssResult {
  double loss = 0.0;                 ///< mean over the batch
  std::vector<double> per_sequence;  ///< unscaled per-sequence losses
  std::vector<Matrix> gradients;     ///< d loss / d embeddings, one per sequence
};

/// Accumulates d(scale * loss_i)/dZ into grad, given the forward trace.
inline void css_backward(const EmbeddingSequence& seq, const RegionPartition& part,
                         const CssConfig& cfg, const CssTrace& tr, double scale, Matrix& grad) {
  const Matrix& z = seq.values;
  const auto s = static_cast<Eigen::Index>(cfg.s);
  const auto c = static_cast<Eigen::Index>(cfg.c);
  const double norm = 2.0 / static_cast<double>(z.cols() * s);
  const double tau = cfg.tau;
  const auto target = static_cast<Eigen::Index>(tr.pstar + cfg.c);
  const auto ps = static_cast<Eigen::Index>(tr.pstar);

  // loss = -tau*delta_g + logsumexp(tau*delta) => dL/ddelta_p = tau (beta_p - [p == g]).
  Matrix gsoft = Matrix::Zero(s, z.cols());
  const auto& P = part.template_region;
  for (std::size_t i = 0; i < tr.beta.weights.size(); ++i) {
    const auto p = static_cast<Eigen::Index>(P.first + i);
    const double gdelta =
        scale * tau * (tr.beta.weights[i] - (p == target ? 1.0 : 0.0));
    if (gdelta == 0.0) continue;
    for (Eigen::Index k = 0; k < s; ++k) {
      // delta_p = -(1/(d s)) sum ||soft_k - z_{p+k}||^2
      const auto diff = (tr.soft.values.row(k) - z.row(p + k)).eval();
      gsoft.row(k) -= gdelta * norm * diff;
      grad.row(p + k) += gdelta * norm * diff;
    }
  }

  // soft_k = sum_q alpha_q z_{q+c+k}
  const auto& Q = part.search;
  std::vector<double> galpha(tr.alpha.weights.size(), 0.0);
  for (std::size_t i = 0; i < tr.alpha.weights.size(); ++i) {
    const auto q = static_cast<Eigen::Index>(Q.first + i);
    const double a = tr.alpha.weights[i];
    double acc = 0.0;
    for (Eigen::Index k = 0; k < s; ++k) {
      acc += gsoft.row(k).dot(z.row(q + c + k));
      grad.row(q + c + k) += a * gsoft.row(k);
    }
    galpha[i] = acc;
  }

  // alpha = softmax(tau * gamma)
  double dot = 0.0;
  for (std::size_t i = 0; i < galpha.size(); ++i) dot += tr.alpha.weights[i] * galpha[i];
  for (std::size_t i = 0; i < galpha.size(); ++i) {
    const double ggamma = tau * tr.alpha.weights[i] * (galpha[i] - dot);
    if (ggamma == 0.0) continue;
    const auto q = static_cast<Eigen::Index>(Q.first + i);
    for (Eigen::Index k = 0; k < s; ++k) {
      const auto diff = (z.row(ps + k) - z.row(q + k)).eval();
      grad.row(ps + k) -= ggamma * norm * diff;
      grad.row(q + k) += ggamma * norm * diff;
    }
  }
}

/// Mean CSS loss over a batch, with gradients w.r.t. every embedding.
inline CssResult css_loss(std::span<const EmbeddingSequence> seqs, const RegionPartition& part,
                          const CssConfig& cfg, std::span<const std::size_t> pstars) {
  echocss::detail::require(!seqs.empty(), "css_loss: empty batch");
  echocss::detail::require(seqs.size() == pstars.size(),
                           "css_loss: need exactly one p* per sequence");
  CssResult res;
  const double inv_n = 1.0 / static_cast<double>(seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto tr = css_forward(seqs[i], part, cfg, pstars[i]);
    res.per_sequence.push_back(tr.loss);
    res.loss += tr.loss * inv_n;
    Matrix g = Matrix::Zero(seqs[i].values.rows(), seqs[i].values.cols());
    css_backward(seqs[i], part, cfg, tr, inv_n, g);
    res.gradients.push_back(std::move(g));
  }
  return res;
}

inline double css_loss_value(const EmbeddingSequence& seq, const RegionPartition& part,
                             const CssConfig& cfg, std::size_t pstar) {
  return css_forward(seq, part, cfg, pstar).loss;
}

/// One p* per sequence, uniform over cfg.pstar_range.
inline std::vector<std::size_t> sample_pstars(Rng& rng, const CssConfig& cfg, std::size_t count) {
  std::vector<std::size_t> out(count);
  for (auto& p : out) p = cfg.pstar_range.first + rng.index(cfg.pstar_range.size());
  return out;
}

/// Compares the analytic gradient against central finite differences on
/// `num_coords` randomly chosen coordinates (all of them if fewer exist).
/// Relative error per coordinate is |a - n| / max(|a|, |n|, abs_floor); the
/// floor keeps coordinates whose true gradient is ~0 from dominating.
/// Returns the maximum.
inline double gradient_check(const EmbeddingSequence& seq, const RegionPartition& part,
                             const CssConfig& cfg, std::size_t pstar, double epsilon, Rng& rng,
                             std::size_t num_coords = 64, double abs_floor = 1e-7) {
  const EmbeddingSequence* one = &seq;
  const std::size_t ps[1] = {pstar};
  const auto analytic = css_loss(std::span(one, 1), part, cfg, ps).gradients.front();
  const std::size_t total = static_cast<std::size_t>(seq.values.size());
  std::vector<std::size_t> coords(total);
  for (std::size_t i = 0; i < total; ++i) coords[i] = i;
  rng.shuffle(coords);
  coords.resize(std::min(num_coords, total));

  EmbeddingSequence work = seq;
  double worst = 0.0;
  for (std::size_t flat : coords) {
    const auto r = static_cast<Eigen::Index>(flat / seq.dim());
    const auto col = static_cast<Eigen::Index>(flat % seq.dim());
    const double orig = work.values(r, col);
    work.values(r, col) = orig + epsilon;
    const double up = css_loss_value(work, part, cfg, pstar);
    work.values(r, col) = orig - epsilon;
    const double down = css_loss_value(work, part, cfg, pstar);
    work.values(r, col) = orig;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double a = analytic(r, col);
    const double denom = std::max({std::abs(a), std::abs(numeric), abs_floor});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace echocss::css
