#include "samplernn/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>

#include "samplernn/errors.hpp"
#include "samplernn/ops.hpp"
#include "samplernn/sample_rnn.hpp"

namespace samplernn {

namespace {

using Tn = Tensor<double>;
using Objective = std::function<Tn()>;

struct Probe {
  std::string name;
  Tn tensor;
};

class FaultGuard {
 public:
  explicit FaultGuard(bool on) : previous_(detail::tanh_gradient_fault()) { detail::set_tanh_gradient_fault(on); }
  ~FaultGuard() { detail::set_tanh_gradient_fault(previous_); }
  FaultGuard(const FaultGuard&) = delete;
  FaultGuard& operator=(const FaultGuard&) = delete;

 private:
  bool previous_;
};

Tn random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tn(std::move(shape), std::move(v));
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

/// sum(w * out) with a fixed random w, so every output element matters.
Tn project(const Tn& out, const Tn& w) { return ops::sum(ops::mul(out, w)); }

void jitter(ParameterList<double>& params, Rng& rng, double scale) {
  for (auto& p : params) {
    for (auto& x : p.tensor.mutable_values()) x += scale * rng.normal();
  }
}

class Checker {
 public:
  Checker(const GradcheckOptions& opt, Rng& rng) : opt_(opt), rng_(rng) {}

  void run(GradcheckCase& result, std::vector<Probe> probes, const Objective& f) {
    for (auto& p : probes) {
      p.tensor.set_requires_grad(true);
      p.tensor.zero_grad();
    }
    {
      Tape<double> tape;
      Tape<double>::Scope scope(tape);
      const Tn loss = f();
      tape.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    for (auto& p : probes) {
      auto g = p.tensor.grad();
      analytic.emplace_back(g.begin(), g.end());
    }
    NoGradScope<double> no_grad;
    for (std::size_t i = 0; i < probes.size(); ++i) {
      auto values = probes[i].tensor.mutable_values();
      std::vector<std::size_t> coords;
      if (values.size() <= opt_.coords_per_tensor) {
        for (std::size_t j = 0; j < values.size(); ++j) coords.push_back(j);
      } else {
        for (std::size_t j = 0; j < opt_.coords_per_tensor; ++j) coords.push_back(rng_.below(values.size()));
      }
      for (const std::size_t j : coords) {
        const double saved = values[j];
        values[j] = saved + opt_.step;
        const double up = f().item();
        values[j] = saved - opt_.step;
        const double down = f().item();
        values[j] = saved;
        const double numeric = (up - down) / (2.0 * opt_.step);
        const double err = gradcheck_relative_error(analytic[i][j], numeric);
        ++result.checks;
        if (!(err <= result.max_rel_error)) {
          result.max_rel_error = std::isfinite(err) ? err : INFINITY;
          result.worst = probes[i].name + "[" + std::to_string(j) + "]";
        }
      }
    }
  }

 private:
  const GradcheckOptions& opt_;
  Rng& rng_;
};

using CaseFn = std::function<void(Checker&, GradcheckCase&, Rng&, std::size_t)>;

void case_linear(Checker& c, GradcheckCase& r, Rng& rng, std::size_t) {
  const std::size_t b = pick(rng, 1, 4), d = pick(rng, 1, 6), o = pick(rng, 1, 6);
  Tn x = random_tensor({b, d}, rng), w = random_tensor({o, d}, rng), bias = random_tensor({o}, rng);
  const Tn proj = random_tensor({b, o}, rng);
  c.run(r, {{"x", x}, {"weight", w}, {"bias", bias}}, [&] { return project(ops::linear(x, w, bias), proj); });
}

template <Tn (*Op)(const Tn&)>
void case_elementwise(Checker& c, GradcheckCase& r, Rng& rng, std::size_t) {
  const std::size_t b = pick(rng, 1, 4), d = pick(rng, 1, 8);
  Tn x = random_tensor({b, d}, rng, 1.5);
  for (auto& v : x.mutable_values()) {
    // keep clear of the relu kink
    if (std::abs(v) < 1e-2) v = v < 0 ? -0.5 : 0.5;
  }
  const Tn proj = random_tensor({b, d}, rng);
  c.run(r, {{"x", x}}, [&] { return project(Op(x), proj); });
}

Tn tanh_op(const Tn& x) { return ops::tanh(x); }
Tn sigmoid_op(const Tn& x) { return ops::sigmoid(x); }
Tn relu_op(const Tn& x) { return ops::relu(x); }

void case_weight_norm(Checker& c, GradcheckCase& r, Rng& rng, std::size_t) {
  const std::size_t b = pick(rng, 1, 4), d = pick(rng, 1, 6), o = pick(rng, 1, 6);
  WeightNormLinear<double> layer(d, o, true, InitSpec::he_fan_in(), rng);
  ParameterList<double> params;
  layer.collect(params, "layer");
  jitter(params, rng, 0.3);
  Tn x = random_tensor({b, d}, rng);
  const Tn proj = random_tensor({b, o}, rng);
  std::vector<Probe> probes{{"x", x}};
  for (auto& p : params) probes.push_back({p.name, p.tensor});
  c.run(r, probes, [&] { return project(layer.forward(x), proj); });
}

template <typename Cell>
void case_cell(Checker& c, GradcheckCase& r, Rng& rng, std::size_t) {
  const std::size_t b = pick(rng, 1, 3), d = pick(rng, 1, 5), h = pick(rng, 1, 5);
  Cell cell(d, h, rng);
  ParameterList<double> params;
  cell.collect(params, "cell");
  jitter(params, rng, 0.3);
  Tn x = random_tensor({b, d}, rng), hp = random_tensor({b, h}, rng, 0.5), cp = random_tensor({b, h}, rng, 0.5);
  const Tn ph = random_tensor({b, h}, rng), pc = random_tensor({b, h}, rng);
  std::vector<Probe> probes{{"x", x}, {"h_prev", hp}};
  constexpr bool kLstm = std::is_same_v<Cell, LstmCell<double>>;
  if constexpr (kLstm) probes.push_back({"c_prev", cp});
  for (auto& p : params) probes.push_back({p.name, p.tensor});
  c.run(r, probes, [&] {
    if constexpr (kLstm) {
      const auto [hn, cn] = lstm_step(cell, hp, cp, x);
      return ops::add(project(hn, ph), project(cn, pc));
    } else {
      return project(gru_step(cell, hp, x), ph);
    }
  });
}

void case_sequence(Checker& c, GradcheckCase& r, Rng& rng, std::size_t instance) {
  const CellKind kind = instance % 2 == 0 ? CellKind::kGru : CellKind::kLstm;
  const std::size_t b = pick(rng, 1, 3), d = pick(rng, 1, 4), h = pick(rng, 1, 4), steps = pick(rng, 1, 5);
  RecurrentLayer<double> layer(kind, d, h, rng);
  ParameterList<double> params;
  layer.collect(params, "layer");
  jitter(params, rng, 0.3);
  Tn x = random_tensor({b * steps, d}, rng);
  const Tn proj = random_tensor({b * steps, h}, rng);
  std::vector<Probe> probes{{"x", x}};
  for (auto& p : params) probes.push_back({p.name, p.tensor});
  c.run(r, probes, [&] {
    const std::vector<bool> fresh(b, true);
    const std::vector<double> none(b * h, 0.0);
    const Tn h0 = ops::blend_rows(layer.initial_hidden(), std::span<const double>(none), fresh);
    Tn c0;
    if (kind == CellKind::kLstm) c0 = ops::blend_rows(layer.initial_cell(), std::span<const double>(none), fresh);
    return project(run_sequence(kind, layer.bind(), x, steps, h0, c0).outputs, proj);
  });
}

void case_mlp(Checker& c, GradcheckCase& r, Rng& rng, std::size_t) {
  const std::size_t b = pick(rng, 1, 4), d = pick(rng, 1, 6), h = pick(rng, 1, 6), o = pick(rng, 1, 6);
  Mlp<double> mlp(d, h, o, false, rng);
  ParameterList<double> params;
  mlp.collect(params, "mlp");
  jitter(params, rng, 0.3);
  Tn x = random_tensor({b, d}, rng);
  const Tn proj = random_tensor({b, o}, rng);
  std::vector<Probe> probes{{"x", x}};
  for (auto& p : params) probes.push_back({p.name, p.tensor});
  c.run(r, probes, [&] { return project(mlp.forward(x), proj); });
}

void case_embedding(Checker& c, GradcheckCase& r, Rng& rng, std::size_t) {
  const std::size_t levels = pick(rng, 2, 16), width = pick(rng, 1, 6), n = pick(rng, 1, 8);
  Embedding<double> table(levels, width, rng);
  std::vector<int> bins(n);
  for (auto& v : bins) v = static_cast<int>(rng.below(levels));
  const Tn proj = random_tensor({n, width}, rng);
  c.run(r, {{"table", table.table()}}, [&] { return project(table.lookup(bins), proj); });
}

void case_upsample(Checker& c, GradcheckCase& r, Rng& rng, std::size_t) {
  const std::size_t b = pick(rng, 1, 3), h = pick(rng, 1, 5), o = pick(rng, 1, 5), ratio = pick(rng, 1, 4);
  std::vector<WeightNormLinear<double>> maps;
  ParameterList<double> params;
  for (std::size_t j = 0; j < ratio; ++j) {
    maps.emplace_back(h, o, true, InitSpec::he_fan_in(), rng);
    maps.back().collect(params, "up" + std::to_string(j));
  }
  jitter(params, rng, 0.3);
  Tn x = random_tensor({b, h}, rng);
  const Tn proj = random_tensor({b * ratio, o}, rng);
  std::vector<Probe> probes{{"h", x}};
  for (auto& p : params) probes.push_back({p.name, p.tensor});
  c.run(r, probes, [&] {
    std::vector<Tn> parts;
    for (const auto& m : maps) parts.push_back(m.forward(x));
    return project(ops::interleave_rows(parts), proj);
  });
}

void case_softmax(Checker& c, GradcheckCase& r, Rng& rng, std::size_t) {
  const std::size_t n = pick(rng, 1, 6), q = pick(rng, 2, 12);
  Tn logits = random_tensor({n, q}, rng, 2.0);
  std::vector<int> targets(n);
  std::vector<double> weights(n);
  for (std::size_t i = 0; i < n; ++i) {
    targets[i] = static_cast<int>(rng.below(q));
    weights[i] = static_cast<double>(rng.below(3)) * 0.5;
  }
  weights[rng.below(n)] = 1.0;
  c.run(r, {{"logits", logits}}, [&] {
    return ops::softmax_cross_entropy(logits, std::span<const int>(targets), std::span<const double>(weights));
  });
}

void case_gmm(Checker& c, GradcheckCase& r, Rng& rng, std::size_t) {
  const std::size_t n = pick(rng, 1, 6), k = pick(rng, 1, 4);
  Tn params = random_tensor({n, 3 * k}, rng);
  std::vector<double> targets(n);
  for (auto& t : targets) t = rng.normal();
  c.run(r, {{"params", params}}, [&] { return ops::gmm_nll(params, std::span<const double>(targets)); });
}

void case_model(Checker& c, GradcheckCase& r, Rng& rng, std::size_t instance, std::vector<std::size_t> frames) {
  ModelConfig cfg;
  cfg.frame_sizes = std::move(frames);
  cfg.hidden = 8;
  cfg.embed_dim = 4;
  cfg.q = 16;
  cfg.zero_output = false;
  cfg.cell = (instance / 4) % 2 == 0 ? CellKind::kGru : CellKind::kLstm;
  cfg.variant = static_cast<Variant>(instance % 4);
  cfg.gmm_components = 3;
  if (cfg.tiers() == 2) cfg.layers = {2};
  auto model = make_model<double>(cfg, rng.next_u64());
  auto params = model->parameters();
  jitter(params, rng, 0.1);

  constexpr std::size_t rows = 2, length = 16;
  Batch<double> batch;
  batch.rows = rows;
  batch.length = length;
  batch.history = model->history();
  for (std::size_t i = 0; i < rows * batch.width(); ++i) {
    const int bin = static_cast<int>(rng.below(static_cast<std::size_t>(cfg.q)));
    batch.bins.push_back(bin);
    batch.inputs.push_back(cfg.continuous() ? rng.normal() : model->input_value(bin, 0.0));
  }
  for (std::size_t i = 0; i < rows * length; ++i) batch.weights.push_back(i % 7 == 3 ? 0.0 : 1.0);

  // one carried row, one fresh row
  ModelState<double> carried = model->initial_state(rows);
  {
    NoGradScope<double> no_grad;
    model->forward(batch, carried);
  }
  carried.fresh[0] = true;

  std::vector<Probe> probes;
  for (auto& p : params) probes.push_back({p.name, p.tensor});
  c.run(r, probes, [&] {
    ModelState<double> state = carried;
    return model->loss(model->forward(batch, state), batch);
  });
}

struct CaseDef {
  std::string name;
  CaseFn fn;
};

const std::vector<CaseDef>& cases() {
  static const std::vector<CaseDef> all{
      {"linear", case_linear},
      {"tanh", case_elementwise<tanh_op>},
      {"sigmoid", case_elementwise<sigmoid_op>},
      {"relu", case_elementwise<relu_op>},
      {"weight_norm_linear", case_weight_norm},
      {"gru_step", case_cell<GruCell<double>>},
      {"lstm_step", case_cell<LstmCell<double>>},
      {"recurrent_sequence", case_sequence},
      {"mlp", case_mlp},
      {"embedding", case_embedding},
      {"upsample", case_upsample},
      {"softmax_head", case_softmax},
      {"gmm_head", case_gmm},
      {"micro_model_2tier",
       [](Checker& c, GradcheckCase& r, Rng& rng, std::size_t i) { case_model(c, r, rng, i, {2, 2}); }},
      {"micro_model_3tier",
       [](Checker& c, GradcheckCase& r, Rng& rng, std::size_t i) { case_model(c, r, rng, i, {2, 2, 4}); }},
  };
  return all;
}

}  // namespace

double gradcheck_relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
  return std::abs(analytic - numeric) / denom;
}

bool GradcheckReport::passed() const {
  return std::all_of(cases.begin(), cases.end(), [](const GradcheckCase& c) { return c.passed; });
}

const GradcheckCase& GradcheckReport::worst() const {
  if (cases.empty()) throw ContractError("gradcheck report is empty");
  return *std::max_element(cases.begin(), cases.end(), [](const GradcheckCase& a, const GradcheckCase& b) {
    return a.max_rel_error < b.max_rel_error;
  });
}

std::vector<std::string> gradcheck_case_names() {
  std::vector<std::string> out;
  for (const auto& c : cases()) out.push_back(c.name);
  return out;
}

GradcheckReport run_gradcheck(const GradcheckOptions& options) {
  for (const auto& name : options.only) {
    const auto names = gradcheck_case_names();
    if (std::find(names.begin(), names.end(), name) == names.end()) {
      throw ConfigError("gradcheck", "unknown case '" + name + "'");
    }
  }
  const auto start = std::chrono::steady_clock::now();
  FaultGuard fault(options.tanh_fault);
  GradcheckReport report;
  for (std::size_t ci = 0; ci < cases().size(); ++ci) {
    const CaseDef& def = cases()[ci];
    if (!options.only.empty() && std::find(options.only.begin(), options.only.end(), def.name) == options.only.end()) {
      continue;
    }
    GradcheckCase result;
    result.name = def.name;
    Rng rng(Rng::mix(options.seed, ci));
    Checker checker(options, rng);
    for (std::size_t i = 0; i < options.instances; ++i) {
      def.fn(checker, result, rng, i);
      ++result.instances;
    }
    result.passed = result.max_rel_error < options.tolerance;
    report.cases.push_back(std::move(result));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace samplernn
