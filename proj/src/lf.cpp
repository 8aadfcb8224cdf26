#include "flockpf/lf.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "json.hpp"

namespace flockpf::lf {

using diff::Tape;
using diff::Tensor;

void Hyperparams::validate() const {
  if (P < 1 || J < 1 || S < 1 || B < 1) throw ConfigError("lf: P, J, S, B must all be >= 1");
  if (E != 1 && E != 2) throw ConfigError("lf: E must be 1 or 2");
}

Tensor AffineStack::forward(Tape* tape, const Tensor& x, double* min_abs_preact) const {
  Tensor h = x;
  for (std::size_t l = 0; l < w.size(); ++l) {
    h = diff::affine(tape, h, w[l], b[l]);
    if (l + 1 < w.size()) {
      if (min_abs_preact != nullptr)
        for (std::size_t i = 0; i < h.size(); ++i)
          *min_abs_preact = std::min(*min_abs_preact, std::abs(h.data()[i]));
      h = diff::leaky_relu(tape, h);
    }
  }
  return h;
}

namespace {

std::vector<int> emb_widths(const Hyperparams& h, int d_sp) {
  return {d_sp + 1, h.bp(), h.bp(), h.bp(), h.bp(), h.P};
}

std::vector<int> fc_widths(const Hyperparams& h) { return {h.P, h.bp(), h.bp(), h.P}; }

std::vector<int> head_widths(const Hyperparams& h, int d_sp) { return {h.P, h.bp(), d_sp + 1}; }

AffineStack make_stack(const std::vector<int>& widths, Rng& rng, bool zero_last) {
  AffineStack s;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const int in = widths[l], out = widths[l + 1];
    Tensor w = Tensor::param(in, out);
    Tensor b = Tensor::param(1, out);
    const bool zero = zero_last && l + 2 == widths.size();
    if (!zero) {
      const double a = std::sqrt(1.0 / in);
      for (auto& v : w.values()) v = rng.uniform(-a, a);
    }
    s.w.push_back(w);
    s.b.push_back(b);
  }
  return s;
}

long stack_params(const std::vector<int>& widths) {
  long acc = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) acc += static_cast<long>(widths[l] + 1) * widths[l + 1];
  return acc;
}

}  // namespace

Parameters Parameters::init(const Hyperparams& hyper, int d_sp, Rng& rng) {
  hyper.validate();
  if (d_sp < 1) throw ConfigError("lf: d_sp must be >= 1");
  Parameters p;
  p.hyper = hyper;
  p.d_sp = d_sp;
  for (int j = 0; j < hyper.J; ++j) {
    FlockBlock blk;
    blk.emb1 = make_stack(emb_widths(hyper, d_sp), rng, false);
    if (hyper.E == 2) blk.emb2 = make_stack(emb_widths(hyper, d_sp), rng, false);
    for (int s = 0; s < hyper.S; ++s) {
      AttentionBlock sa;
      const double a = std::sqrt(1.0 / hyper.P);
      auto proj = [&](Tensor& w, Tensor& b) {
        w = Tensor::param(hyper.P, hyper.P);
        b = Tensor::param(1, hyper.P);
        for (auto& v : w.values()) v = rng.uniform(-a, a);
      };
      proj(sa.wq, sa.bq);
      proj(sa.wk, sa.bk);
      proj(sa.wv, sa.bv);
      proj(sa.wo, sa.bo);
      sa.fc = make_stack(fc_widths(hyper), rng, false);
      blk.sa.push_back(std::move(sa));
    }
    blk.head = make_stack(head_widths(hyper, d_sp), rng, true);
    p.blocks.push_back(std::move(blk));
  }
  if (hyper.J > 1) p.baseline_head = make_stack(head_widths(hyper, d_sp), rng, true);

  const long have = p.parameter_count();
  const long want = expected_parameter_count(hyper, d_sp);
  if (have != want)
    throw NumericalError("lf: parameter count " + std::to_string(have) + " != closed form " + std::to_string(want));
  return p;
}

long Parameters::parameter_count() const {
  long acc = 0;
  for (const auto& [name, t] : named_tensors()) {
    (void)name;
    acc += static_cast<long>(t.size());
  }
  return acc;
}

long Parameters::expected_parameter_count(const Hyperparams& hyper, int d_sp) {
  const long emb = stack_params(emb_widths(hyper, d_sp));
  const long fc = stack_params(fc_widths(hyper));
  const long head = stack_params(head_widths(hyper, d_sp));
  const long proj = 4L * (hyper.P + 1) * hyper.P;
  long per_block = hyper.E * emb + hyper.S * (proj + fc) + head;
  long total = hyper.J * per_block;
  if (hyper.J > 1) total += head;
  return total;
}

std::vector<std::pair<std::string, Tensor>> Parameters::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto add_stack = [&](const std::string& prefix, const AffineStack& s) {
    for (std::size_t l = 0; l < s.w.size(); ++l) {
      out.emplace_back(prefix + ".w" + std::to_string(l), s.w[l]);
      out.emplace_back(prefix + ".b" + std::to_string(l), s.b[l]);
    }
  };
  for (std::size_t j = 0; j < blocks.size(); ++j) {
    const std::string bp = "block" + std::to_string(j);
    add_stack(bp + ".emb1", blocks[j].emb1);
    if (hyper.E == 2) add_stack(bp + ".emb2", blocks[j].emb2);
    for (std::size_t s = 0; s < blocks[j].sa.size(); ++s) {
      const std::string sp = bp + ".sa" + std::to_string(s);
      const auto& sa = blocks[j].sa[s];
      out.emplace_back(sp + ".wq", sa.wq);
      out.emplace_back(sp + ".bq", sa.bq);
      out.emplace_back(sp + ".wk", sa.wk);
      out.emplace_back(sp + ".bk", sa.bk);
      out.emplace_back(sp + ".wv", sa.wv);
      out.emplace_back(sp + ".bv", sa.bv);
      out.emplace_back(sp + ".wo", sa.wo);
      out.emplace_back(sp + ".bo", sa.bo);
      add_stack(sp + ".fc", sa.fc);
    }
    add_stack(bp + ".head", blocks[j].head);
  }
  if (hyper.J > 1) add_stack("baseline_head", baseline_head);
  return out;
}

std::vector<Tensor> Parameters::tensors() const {
  std::vector<Tensor> out;
  for (auto& [n, t] : named_tensors()) {
    (void)n;
    out.push_back(t);
  }
  return out;
}

Parameters Parameters::clone() const {
  Rng scratch(0);
  Parameters c = init(hyper, d_sp, scratch);
  auto src = named_tensors();
  auto dst = c.named_tensors();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i].second.values() = src[i].second.values();
  return c;
}

std::vector<Tensor> substate_inputs(const pf::ParticleSet& set) {
  const int n = set.n(), t = set.t, d = set.d_sp;
  if (n < 1 || t < 1) throw ConfigError("lf: set must have N >= 1 and t >= 1");
  const double wsum = set.weights.sum();
  if (!(wsum > 0.0)) throw ConfigError("lf: set weights must have positive sum");
  std::vector<Tensor> inputs;
  inputs.reserve(t);
  for (int j = 0; j < t; ++j) {
    Tensor x(n, d + 1);
    for (int i = 0; i < n; ++i) {
      for (int k = 0; k < d; ++k) x.at(i, k) = set.particles(i, j * d + k);
      x.at(i, d) = n * (set.weights(i) / wsum);
    }
    inputs.push_back(std::move(x));
  }
  return inputs;
}

namespace {

Tensor attention_pass(Tape* tape, const AttentionBlock& sa, const Tensor& h, double* margin) {
  Tensor q = diff::affine(tape, h, sa.wq, sa.bq);
  Tensor k = diff::affine(tape, h, sa.wk, sa.bk);
  Tensor v = diff::affine(tape, h, sa.wv, sa.bv);
  Tensor o = diff::affine(tape, diff::softmax_attention(tape, q, k, v), sa.wo, sa.bo);
  Tensor h1 = diff::add(tape, h, o);
  Tensor f = sa.fc.forward(tape, h1, margin);
  return diff::add(tape, h1, f);
}

}  // namespace

ForwardResult lf_forward_parts(Tape* tape, const Parameters& params, const pf::ParticleSet& set,
                               double* min_abs_preact) {
  params.hyper.validate();
  if (set.d_sp != params.d_sp) throw ConfigError("lf_forward: sub-state dimension mismatch");
  const int n = set.n(), t = set.t, d = set.d_sp;
  const auto inputs = substate_inputs(set);

  std::vector<Tensor> corr(t);       // per sub-state [N, d_sp+1]
  ForwardResult result;
  result.baseline.assign(static_cast<std::size_t>(t) * (d + 1), 0.0);

  for (int bi = 0; bi < params.hyper.J; ++bi) {
    const FlockBlock& blk = params.blocks[bi];
    // Embeddings: main, plus the mean of the other sub-particles' secondary
    // embeddings when E == 2 (zero when t == 1).
    std::vector<Tensor> full(t);
    std::vector<Tensor> e2(t);
    Tensor e2_sum;
    if (params.hyper.E == 2 && t > 1) {
      for (int j = 0; j < t; ++j) {
        e2[j] = blk.emb2.forward(tape, inputs[j], min_abs_preact);
        e2_sum = j == 0 ? e2[j] : diff::add(tape, e2_sum, e2[j]);
      }
    }
    for (int j = 0; j < t; ++j) {
      Tensor e1 = blk.emb1.forward(tape, inputs[j], min_abs_preact);
      if (params.hyper.E == 2 && t > 1) {
        Tensor others = diff::scale(tape, diff::sub(tape, e2_sum, e2[j]), 1.0 / (t - 1));
        full[j] = diff::add(tape, e1, others);
      } else {
        full[j] = e1;
      }
    }
    // Per-sub-state attention over the N embeddings, then the per-particle
    // head. The last block also emits the per-sub-state baseline shift.
    for (int j = 0; j < t; ++j) {
      Tensor h = full[j];
      for (const auto& sa : blk.sa) h = attention_pass(tape, sa, h, min_abs_preact);
      Tensor c = blk.head.forward(tape, h, min_abs_preact);
      corr[j] = corr[j].defined() ? diff::add(tape, corr[j], c) : c;
      if (bi == params.hyper.J - 1 && params.hyper.J > 1) {
        Tensor g = diff::mean_rows(tape, h);
        Tensor base = params.baseline_head.forward(tape, g, min_abs_preact);
        for (int k = 0; k <= d; ++k) result.baseline[static_cast<std::size_t>(j) * (d + 1) + k] = base.at(0, k);
        corr[j] = diff::add_rowvec(tape, corr[j], base);
      }
    }
  }

  // Concatenate sub-state position corrections; average the t weight
  // scalars and undo the N scaling of the weight channel.
  std::vector<Tensor> parts;
  parts.reserve(t + 1);
  Tensor dw;
  for (int j = 0; j < t; ++j) {
    parts.push_back(diff::slice_cols(tape, corr[j], 0, d));
    Tensor wj = diff::slice_cols(tape, corr[j], d, d + 1);
    dw = dw.defined() ? diff::add(tape, dw, wj) : wj;
  }
  parts.push_back(diff::scale(tape, dw, 1.0 / (static_cast<double>(t) * n)));
  result.correction = diff::concat_cols(tape, parts);
  return result;
}

Tensor lf_forward(Tape* tape, const Parameters& params, const pf::ParticleSet& set) {
  return lf_forward_parts(tape, params, set).correction;
}

double activation_margin(const Parameters& params, const pf::ParticleSet& set) {
  double margin = std::numeric_limits<double>::infinity();
  (void)lf_forward_parts(nullptr, params, set, &margin);
  return margin;
}

pf::ParticleSet lf_apply(const Parameters& params, const pf::ParticleSet& set) {
  const Tensor corr = lf_forward(nullptr, params, set);
  const int n = set.n(), t = set.t, d = set.d_sp;
  pf::ParticleSet out = set;
  const double wscale = set.normalized ? 1.0 : set.weights.sum();
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < t * d; ++c) out.particles(i, c) += corr.at(i, c);
    out.weights(i) += wscale * corr.at(i, t * d);
  }
  out.normalized = false;
  return out;
}

FpmCount fpm_count(const Hyperparams& hyper, int d_sp, int t, int n_particles) {
  hyper.validate();
  if (d_sp < 1 || t < 1 || n_particles < 1) throw ConfigError("fpm_count: dims must be >= 1");
  const double p = hyper.P, b = hyper.B, j = hyper.J, s = hyper.S, e = hyper.E;
  const double n = n_particles;
  FpmCount c;
  c.embedding = j * e * t * b * p * (p + d_sp + 3.0 * b * p);
  c.attention = j * s * t * 2.0 * p * p * (2.0 + n / p + b + b * b);
  c.final_fc = t * b * p * (b * p + d_sp);
  c.total = c.embedding + c.attention + c.final_fc;
  return c;
}

namespace {

nlohmann::ordered_json tensor_json(const Tensor& t) {
  nlohmann::ordered_json j;
  j["rows"] = t.rows();
  j["cols"] = t.cols();
  j["values"] = t.values();
  return j;
}

}  // namespace

void save_checkpoint(const Parameters& params, const CheckpointMeta& meta, const std::string& path) {
  nlohmann::ordered_json j;
  j["format"] = "lf-ckpt-v1";
  j["hyper"] = {{"P", params.hyper.P}, {"J", params.hyper.J}, {"S", params.hyper.S},
                {"E", params.hyper.E}, {"B", params.hyper.B}};
  j["d_sp"] = params.d_sp;
  j["meta"] = {{"scenario_id", meta.scenario_id}, {"snr_db", meta.snr_db},  {"n_particles", meta.n_particles},
               {"teacher_n", meta.teacher_n},     {"epoch", meta.epoch},    {"loss", meta.loss}};
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  for (const auto& [name, t] : params.named_tensors()) {
    nlohmann::ordered_json tj = tensor_json(t);
    tj["name"] = name;
    tensors.push_back(tj);
  }
  j["tensors"] = tensors;
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write checkpoint: " + path);
  f << j << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open checkpoint: " + path);
  nlohmann::json j;
  f >> j;
  if (j.value("format", "") != "lf-ckpt-v1") throw ConfigError("checkpoint: unexpected format tag");
  Hyperparams h;
  h.P = j.at("hyper").at("P").get<int>();
  h.J = j.at("hyper").at("J").get<int>();
  h.S = j.at("hyper").at("S").get<int>();
  h.E = j.at("hyper").at("E").get<int>();
  h.B = j.at("hyper").at("B").get<int>();
  const int d_sp = j.at("d_sp").get<int>();
  Rng scratch(0);
  Checkpoint ck{Parameters::init(h, d_sp, scratch), {}};
  const auto& mj = j.at("meta");
  ck.meta.scenario_id = mj.at("scenario_id").get<std::string>();
  ck.meta.snr_db = mj.at("snr_db").get<double>();
  ck.meta.n_particles = mj.at("n_particles").get<int>();
  ck.meta.teacher_n = mj.at("teacher_n").get<int>();
  ck.meta.epoch = mj.at("epoch").get<int>();
  ck.meta.loss = mj.at("loss").get<double>();

  auto named = ck.params.named_tensors();
  const auto& tensors = j.at("tensors");
  if (tensors.size() != named.size()) throw ConfigError("checkpoint: tensor count mismatch");
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& tj = tensors.at(i);
    if (tj.at("name").get<std::string>() != named[i].first)
      throw ConfigError("checkpoint: tensor name mismatch at " + named[i].first);
    Tensor& t = named[i].second;
    if (tj.at("rows").get<int>() != t.rows() || tj.at("cols").get<int>() != t.cols())
      throw ConfigError("checkpoint: tensor shape mismatch at " + named[i].first);
    const auto vals = tj.at("values").get<std::vector<double>>();
    if (vals.size() != t.size()) throw ConfigError("checkpoint: tensor size mismatch at " + named[i].first);
    t.values() = vals;
  }
  return ck;
}

}  // namespace flockpf::lf
