// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#include "opadpo/policy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>

#include "opadpo/error.hpp"
#include "opadpo/format.hpp"
#include "opadpo/rng.hpp"

namespace opadpo::policy {

void PolicySpec::validate() const {
  require(vocab_size >= 3, ErrorKind::config, "vocab_size must be >= 3");
  require(max_len >= 1, ErrorKind::config, "max_len must be >= 1");
  require(image_dim >= 1, ErrorKind::config, "image_dim must be >= 1");
  require(embed_dim >= 1, ErrorKind::config, "embed_dim must be >= 1");
  require(hidden_dim >= 1, ErrorKind::config, "hidden_dim must be >= 1");
}

Layout Layout::of(const PolicySpec& s) {
  const auto C = static_cast<std::size_t>(s.vocab_size);
  const auto L = static_cast<std::size_t>(s.max_len);
  const auto K = static_cast<std::size_t>(s.image_dim);
  const auto d = static_cast<std::size_t>(s.embed_dim);
  const auto h = static_cast<std::size_t>(s.hidden_dim);
  Layout l;
  std::size_t at = 0;
  l.tok_embed = at;   at += C * d;
  l.image_proj = at;  at += K * d;
  l.pos_embed = at;   at += L * d;
  l.mix_context = at; at += d * h;
  l.mix_last = at;    at += d * h;
  l.hidden_bias = at; at += h;
  l.out_weight = at;  at += h * C;
  l.out_bias = at;    at += C;
  l.total = at;
  return l;
}

const char* to_string(Role role) {
  switch (role) {
    case Role::base: return "base";
    case Role::reference: return "reference";
    case Role::opa: return "opa";
    case Role::trainee: return "trainee";
  }
  return "base";
}

Role role_from_string(const std::string& s) {
  if (s == "base") return Role::base;
  if (s == "reference") return Role::reference;
  if (s == "opa") return Role::opa;
  if (s == "trainee") return Role::trainee;
  fail(ErrorKind::config, "unknown role '" + s + "'");
}

ParameterSet ParameterSet::zeros(const PolicySpec& spec, Role role) {
  spec.validate();
  return ParameterSet{spec, std::vector<double>(Layout::of(spec).total, 0.0), role};
}

ParameterSet ParameterSet::random(const PolicySpec& spec, std::uint64_t seed, Role role) {
  auto p = zeros(spec, role);
  Rng rng(seed);
  for (auto& v : p.values) v = rng.uniform(-0.08, 0.08);
  return p;
}

bool ParameterSet::all_finite() const {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

std::uint64_t ParameterSet::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : values) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    unsigned char bytes[8];
    for (int b = 0; b < 8; ++b) bytes[b] = static_cast<unsigned char>(bits >> (8 * b));
    h = fnv1a64(bytes, 8, h);
  }
  return h;
}

std::vector<Span> triple_spans(int content_len) {
  std::vector<Span> spans;
  if (content_len <= 0) return spans;
  if (content_len < 3) {
    spans.emplace_back(0, content_len);
    return spans;
  }
  const int n = content_len / 3;
  for (int s = 0; s < n; ++s) spans.emplace_back(3 * s, 3 * s + 3);
  spans.back().second = content_len;
  return spans;
}

Response::Response(const PolicySpec& spec, Tokens tokens, std::vector<Span> spans)
    : tokens_(std::move(tokens)), spans_(std::move(spans)) {
  require(!tokens_.empty(), ErrorKind::length, "response must contain at least one token");
  require(static_cast<int>(tokens_.size()) <= spec.max_len, ErrorKind::length,
          "response length " + std::to_string(tokens_.size()) + " exceeds max_len " +
              std::to_string(spec.max_len));
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const int t = tokens_[i];
    require(t >= 0 && t < spec.vocab_size, ErrorKind::domain,
            "token id " + std::to_string(t) + " outside vocabulary");
    require(t != spec.eos() || i + 1 == tokens_.size(), ErrorKind::domain,
            "EOS may only appear as the final token");
  }
  terminated_ = tokens_.back() == spec.eos();
  int at = 0;
  for (const auto& [b, e] : spans_) {
    require(b == at && e > b, ErrorKind::domain, "sentence spans must be contiguous and nonempty");
    at = e;
  }
  require(at == content_size(), ErrorKind::domain,
          "sentence spans must cover exactly the non-EOS tokens");
}

Response::Response(const PolicySpec& spec, Tokens tokens)
    : Response(spec, tokens,
               triple_spans(!tokens.empty() && tokens.back() == spec.eos()
                                ? static_cast<int>(tokens.size()) - 1
                                : static_cast<int>(tokens.size()))) {}

std::vector<double> Response::expand_sentence_weights(std::span<const double> per_sentence,
                                                      double eos_weight) const {
  require(per_sentence.size() == spans_.size(), ErrorKind::shape,
          "sentence weight count " + std::to_string(per_sentence.size()) +
              " does not match sentence count " + std::to_string(spans_.size()));
  std::vector<double> w(tokens_.size(), eos_weight);
  for (std::size_t s = 0; s < spans_.size(); ++s)
    for (int i = spans_[s].first; i < spans_[s].second; ++i) w[i] = per_sentence[s];
  return w;
}

namespace {

/// Views into the flat parameter vector.
struct Weights {
  const double* E;   // C x d
  const double* P;   // K x d
  const double* Q;   // L x d
  const double* M;   // d x h
  const double* R;   // d x h
  const double* bh;  // h
  const double* O;   // h x C
  const double* bo;  // C
  int C, L, K, d, h;

  explicit Weights(const ParameterSet& p) {
    const auto l = p.layout();
    const double* v = p.values.data();
    E = v + l.tok_embed;
    P = v + l.image_proj;
    Q = v + l.pos_embed;
    M = v + l.mix_context;
    R = v + l.mix_last;
    bh = v + l.hidden_bias;
    O = v + l.out_weight;
    bo = v + l.out_bias;
    C = p.spec.vocab_size;
    L = p.spec.max_len;
    K = p.spec.image_dim;
    d = p.spec.embed_dim;
    h = p.spec.hidden_dim;
  }
};

void check_inputs(const ParameterSet& params, std::span<const int> prompt,
                  const ImageFeatures& image) {
  require(params.values.size() == params.layout().total, ErrorKind::shape,
          "parameter vector size does not match spec");
  require(params.all_finite(), ErrorKind::numeric, "non-finite parameters");
  require(static_cast<int>(image.features.size()) == params.spec.image_dim, ErrorKind::shape,
          "image feature length does not match image_dim");
  for (double f : image.features)
    require(std::isfinite(f), ErrorKind::numeric, "non-finite image feature");
  for (int t : prompt)
    require(t >= 0 && t < params.spec.vocab_size, ErrorKind::domain,
            "prompt token id " + std::to_string(t) + " outside vocabulary");
}

/// Per-position activations kept for the backward pass.
struct Trace {
  int positions = 0;
  std::vector<double> s;       // positions x d : pool + image + position
  std::vector<double> last;    // positions x d : last-token embedding (0 if none)
  std::vector<int> last_tok;   // -1 if history empty
  std::vector<int> hist_len;   // |x| + i
  std::vector<double> z;       // positions x h : tanh(a)
  std::vector<double> logp;    // positions x C
};

void log_softmax_inplace(double* v, int n) {
  double mx = v[0];
  for (int c = 1; c < n; ++c) mx = std::max(mx, v[c]);
  double sum = 0.0;
  for (int c = 0; c < n; ++c) sum += std::exp(v[c] - mx);
  const double lse = mx + std::log(sum);
  for (int c = 0; c < n; ++c) v[c] -= lse;
}

/// Runs the network for `positions` steps along tokens `seq` (only the
/// first positions-1 tokens are consumed as history).
Trace forward(const Weights& w, std::span<const int> prompt, const ImageFeatures& image,
              std::span<const int> seq, int positions) {
  const int d = w.d, h = w.h, C = w.C;
  Trace t;
  t.positions = positions;
  t.s.assign(static_cast<std::size_t>(positions) * d, 0.0);
  t.last.assign(static_cast<std::size_t>(positions) * d, 0.0);
  t.last_tok.assign(positions, -1);
  t.hist_len.assign(positions, 0);
  t.z.assign(static_cast<std::size_t>(positions) * h, 0.0);
  t.logp.assign(static_cast<std::size_t>(positions) * C, 0.0);

  std::vector<double> img(d, 0.0);
  for (int k = 0; k < w.K; ++k) {
    const double mk = image.features[k];
    if (mk == 0.0) continue;
    for (int j = 0; j < d; ++j) img[j] += mk * w.P[k * d + j];
  }

  std::vector<double> pool_sum(d, 0.0);
  int n = 0;
  int last = -1;
  for (int tok : prompt) {
    for (int j = 0; j < d; ++j) pool_sum[j] += w.E[tok * d + j];
    ++n;
    last = tok;
  }

  std::vector<double> a(h);
  for (int i = 0; i < positions; ++i) {
    if (i > 0) {
      const int tok = seq[i - 1];
      for (int j = 0; j < d; ++j) pool_sum[j] += w.E[tok * d + j];
      ++n;
      last = tok;
    }
    double* s = &t.s[static_cast<std::size_t>(i) * d];
    double* lv = &t.last[static_cast<std::size_t>(i) * d];
    const double inv_n = n > 0 ? 1.0 / n : 0.0;
    for (int j = 0; j < d; ++j) s[j] = pool_sum[j] * inv_n + img[j] + w.Q[i * d + j];
    if (last >= 0)
      for (int j = 0; j < d; ++j) lv[j] = w.E[last * d + j];
    t.last_tok[i] = last;
    t.hist_len[i] = n;

    for (int u = 0; u < h; ++u) a[u] = w.bh[u];
    for (int j = 0; j < d; ++j) {
      const double sj = s[j], lj = lv[j];
      const double* Mrow = w.M + j * h;
      const double* Rrow = w.R + j * h;
      for (int u = 0; u < h; ++u) a[u] += sj * Mrow[u] + lj * Rrow[u];
    }
    double* z = &t.z[static_cast<std::size_t>(i) * h];
    for (int u = 0; u < h; ++u) z[u] = std::tanh(a[u]);

    double* lp = &t.logp[static_cast<std::size_t>(i) * C];
    for (int c = 0; c < C; ++c) lp[c] = w.bo[c];
    for (int u = 0; u < h; ++u) {
      const double zu = z[u];
      const double* Orow = w.O + u * C;
      for (int c = 0; c < C; ++c) lp[c] += zu * Orow[c];
    }
    log_softmax_inplace(lp, C);
  }
  return t;
}

}  // namespace

std::vector<double> next_token_dist(const ParameterSet& params, std::span<const int> prompt,
                                    const ImageFeatures& image, std::span<const int> prefix) {
  check_inputs(params, prompt, image);
  require(static_cast<int>(prefix.size()) < params.spec.max_len, ErrorKind::length,
          "prefix length " + std::to_string(prefix.size()) + " must be < max_len");
  for (int t : prefix)
    require(t >= 0 && t < params.spec.vocab_size, ErrorKind::domain,
            "prefix token id " + std::to_string(t) + " outside vocabulary");
  const Weights w(params);
  const int positions = static_cast<int>(prefix.size()) + 1;
  // forward() reads seq[i-1] for i < positions, i.e. exactly the prefix.
  const auto t = forward(w, prompt, image, prefix, positions);
  std::vector<double> p(w.C);
  const double* lp = &t.logp[static_cast<std::size_t>(positions - 1) * w.C];
  for (int c = 0; c < w.C; ++c) p[c] = std::exp(lp[c]);
  return p;
}

std::vector<double> token_log_probs(const ParameterSet& params, std::span<const int> prompt,
                                    const ImageFeatures& image, const Response& y) {
  check_inputs(params, prompt, image);
  require(y.size() <= params.spec.max_len, ErrorKind::length, "response exceeds max_len");
  for (int tok : y.tokens())
    require(tok >= 0 && tok < params.spec.vocab_size, ErrorKind::domain,
            "token id " + std::to_string(tok) + " outside vocabulary");
  const Weights w(params);
  const auto t = forward(w, prompt, image, y.tokens(), y.size());
  std::vector<double> out(y.size());
  for (int i = 0; i < y.size(); ++i)
    out[i] = t.logp[static_cast<std::size_t>(i) * w.C + y.tokens()[i]];
  return out;
}

std::vector<std::vector<double>> position_distributions(const ParameterSet& params,
                                                        std::span<const int> prompt,
                                                        const ImageFeatures& image,
                                                        const Response& y) {
  check_inputs(params, prompt, image);
  require(y.size() <= params.spec.max_len, ErrorKind::length, "response exceeds max_len");
  const Weights w(params);
  const auto t = forward(w, prompt, image, y.tokens(), y.size());
  std::vector<std::vector<double>> out(y.size(), std::vector<double>(w.C));
  for (int i = 0; i < y.size(); ++i)
    for (int c = 0; c < w.C; ++c)
      out[i][c] = std::exp(t.logp[static_cast<std::size_t>(i) * w.C + c]);
  return out;
}

double response_log_prob(const ParameterSet& params, std::span<const int> prompt,
                         const ImageFeatures& image, const Response& y) {
  const auto lp = token_log_probs(params, prompt, image, y);
  double s = 0.0;
  for (double v : lp) s += v;
  return s;
}

double weighted_log_prob(const ParameterSet& params, std::span<const int> prompt,
                         const ImageFeatures& image, const Response& y,
                         std::span<const double> weights) {
  require(static_cast<int>(weights.size()) == y.size(), ErrorKind::shape,
          "weight count does not match response length");
  const auto lp = token_log_probs(params, prompt, image, y);
  double s = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) s += weights[i] * lp[i];
  return s;
}

void accumulate_weighted_grad(const ParameterSet& params, std::span<const int> prompt,
                              const ImageFeatures& image, const Response& y,
                              std::span<const double> weights, std::span<double> grad) {
  require(static_cast<int>(weights.size()) == y.size(), ErrorKind::shape,
          "weight count does not match response length");
  require(grad.size() == params.values.size(), ErrorKind::shape,
          "gradient buffer size does not match parameters");
  if (std::all_of(weights.begin(), weights.end(), [](double v) { return v == 0.0; })) return;
  check_inputs(params, prompt, image);

  const Weights w(params);
  const auto l = params.layout();
  const int d = w.d, h = w.h, C = w.C;
  const auto t = forward(w, prompt, image, y.tokens(), y.size());

  double* gE = grad.data() + l.tok_embed;
  double* gP = grad.data() + l.image_proj;
  double* gQ = grad.data() + l.pos_embed;
  double* gM = grad.data() + l.mix_context;
  double* gR = grad.data() + l.mix_last;
  double* gbh = grad.data() + l.hidden_bias;
  double* gO = grad.data() + l.out_weight;
  double* gbo = grad.data() + l.out_bias;

  const int P = y.size();
  // ds / n per position, for the mean-pool backward via suffix sums.
  std::vector<double> pool_grad(static_cast<std::size_t>(P) * d, 0.0);
  std::vector<double> img_grad(d, 0.0);
  std::vector<double> dlogit(C), dz(h), da(h), ds(d);

  for (int i = 0; i < P; ++i) {
    const double wi = weights[i];
    if (wi == 0.0) continue;
    const double* lp = &t.logp[static_cast<std::size_t>(i) * C];
    const double* z = &t.z[static_cast<std::size_t>(i) * h];
    const double* s = &t.s[static_cast<std::size_t>(i) * d];
    const double* lv = &t.last[static_cast<std::size_t>(i) * d];
    const int target = y.tokens()[i];

    for (int c = 0; c < C; ++c) dlogit[c] = -wi * std::exp(lp[c]);
    dlogit[target] += wi;

    for (int c = 0; c < C; ++c) gbo[c] += dlogit[c];
    for (int u = 0; u < h; ++u) {
      double acc = 0.0;
      double* gOrow = gO + u * C;
      const double* Orow = w.O + u * C;
      for (int c = 0; c < C; ++c) {
        gOrow[c] += z[u] * dlogit[c];
        acc += Orow[c] * dlogit[c];
      }
      dz[u] = acc;
      da[u] = acc * (1.0 - z[u] * z[u]);
      gbh[u] += da[u];
    }
    const int last = t.last_tok[i];
    for (int j = 0; j < d; ++j) {
      double acc_s = 0.0, acc_l = 0.0;
      double* gMrow = gM + j * h;
      double* gRrow = gR + j * h;
      const double* Mrow = w.M + j * h;
      const double* Rrow = w.R + j * h;
      for (int u = 0; u < h; ++u) {
        gMrow[u] += s[j] * da[u];
        gRrow[u] += lv[j] * da[u];
        acc_s += Mrow[u] * da[u];
        acc_l += Rrow[u] * da[u];
      }
      ds[j] = acc_s;
      if (last >= 0) gE[last * d + j] += acc_l;
      gQ[i * d + j] += ds[j];
      img_grad[j] += ds[j];
      if (t.hist_len[i] > 0) pool_grad[static_cast<std::size_t>(i) * d + j] = ds[j] / t.hist_len[i];
    }
  }

  for (int k = 0; k < w.K; ++k) {
    const double mk = image.features[k];
    if (mk == 0.0) continue;
    for (int j = 0; j < d; ++j) gP[k * d + j] += mk * img_grad[j];
  }

  // History token at index j (prompt first, then y) feeds every position i
  // whose history covers it: prompt tokens feed all positions, y_k feeds i > k.
  std::vector<double> suffix(d, 0.0);
  for (int i = P - 1; i >= 1; --i) {
    for (int j = 0; j < d; ++j) suffix[j] += pool_grad[static_cast<std::size_t>(i) * d + j];
    const int tok = y.tokens()[i - 1];
    for (int j = 0; j < d; ++j) gE[tok * d + j] += suffix[j];
  }
  for (int j = 0; j < d; ++j) suffix[j] += pool_grad[j];
  for (int tok : prompt)
    for (int j = 0; j < d; ++j) gE[tok * d + j] += suffix[j];
}

std::vector<double> grad_weighted_log_prob(const ParameterSet& params,
                                           std::span<const int> prompt,
                                           const ImageFeatures& image, const Response& y,
                                           std::span<const double> weights) {
  std::vector<double> g(params.values.size(), 0.0);
  accumulate_weighted_grad(params, prompt, image, y, weights, g);
  return g;
}

void SamplingConfig::validate() const {
  if (greedy) return;
  require(top_p > 0.0 && top_p <= 1.0, ErrorKind::config, "top_p must lie in (0, 1]");
  require(temperature > 0.0, ErrorKind::config, "temperature must be > 0");
  require(top_k >= 1, ErrorKind::config, "top_k must be >= 1");
}

int argmax_token(std::span<const double> dist) {
  int best = 0;
  for (int c = 1; c < static_cast<int>(dist.size()); ++c)
    if (dist[c] > dist[best]) best = c;
  return best;
}

std::vector<std::pair<int, double>> filtered_candidates(std::span<const double> dist,
                                                        const SamplingConfig& cfg) {
  cfg.validate();
  const int C = static_cast<int>(dist.size());
  std::vector<std::pair<int, double>> cand(C);
  // Temperature rescaling of the log-probabilities, stabilised by the max.
  double mx = -INFINITY;
  for (int c = 0; c < C; ++c) mx = std::max(mx, std::log(dist[c]) / cfg.temperature);
  double total = 0.0;
  for (int c = 0; c < C; ++c) {
    const double v = std::exp(std::log(dist[c]) / cfg.temperature - mx);
    cand[c] = {c, v};
    total += v;
  }
  for (auto& [id, p] : cand) p /= total;
  std::stable_sort(cand.begin(), cand.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  cand.resize(std::min(cfg.top_k, C));
  if (cfg.top_p < 1.0) {
    double cum = 0.0;
    std::size_t keep = 0;
    while (keep < cand.size()) {
      cum += cand[keep].second;
      ++keep;
      if (cum >= cfg.top_p) break;
    }
    cand.resize(keep);
  }
  double kept = 0.0;
  for (const auto& c : cand) kept += c.second;
  for (auto& c : cand) c.second /= kept;
  return cand;
}

Response sample_response(const ParameterSet& params, std::span<const int> prompt,
                         const ImageFeatures& image, const SamplingConfig& cfg,
                         std::uint64_t seed) {
  cfg.validate();
  check_inputs(params, prompt, image);
  const Weights w(params);
  Rng rng(seed);
  Tokens out;
  const int L = params.spec.max_len;
  while (static_cast<int>(out.size()) < L) {
    // Re-running the prefix keeps this path identical to the scoring path.
    const auto t = forward(w, prompt, image, out, static_cast<int>(out.size()) + 1);
    const double* lp = &t.logp[out.size() * static_cast<std::size_t>(w.C)];
    std::vector<double> dist(w.C);
    for (int c = 0; c < w.C; ++c) dist[c] = std::exp(lp[c]);
    int tok;
    if (cfg.greedy) {
      tok = argmax_token(dist);
    } else {
      const auto cand = filtered_candidates(dist, cfg);
      const double u = rng.uniform();
      double cum = 0.0;
      tok = cand.back().first;
      for (const auto& [id, p] : cand) {
        cum += p;
        if (u < cum) {
          tok = id;
          break;
        }
      }
    }
    out.push_back(tok);
    if (tok == params.spec.eos()) break;
  }
  return Response(params.spec, std::move(out));
}

}  // namespace opadpo::policy
