#include "saan/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "saan/ops.hpp"
#include "saan/rng.hpp"

namespace saan {

bool GradCheckReport::passed() const { return failures() == 0 && !probes.empty(); }

std::size_t GradCheckReport::failures() const {
  return static_cast<std::size_t>(std::count_if(probes.begin(), probes.end(), [](const auto& p) { return !p.pass; }));
}

double GradCheckReport::max_rel_error() const {
  double m = 0;
  for (const auto& p : probes) m = std::max(m, p.rel_error);
  return m;
}

namespace {

template <typename S>
double projected(const Tensor<S>& out, const Tensor<S>& weights) {
  double acc = 0;
  for (Index i = 0; i < out.size(); ++i) acc += static_cast<double>(out[i]) * weights[i];
  return acc;
}

}  // namespace

template <typename S>
GradCheckReport finite_difference_check(const TapeFunction<S>& f, const std::vector<Tensor<S>>& inputs,
                                        const GradCheckOptions& options) {
  Xoshiro256pp rng(options.seed);
  auto wants = [&](std::size_t i) { return options.check_input.empty() || options.check_input.at(i); };

  // Analytic pass.
  Tape<S> tape;
  std::vector<Var<S>> vars;
  for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(tape.leaf(inputs[i], wants(i)));
  Var<S> out = f(tape, vars);
  Tensor<S> weights(out.shape());
  if (out.value().size() == 1) {
    weights[0] = S(1);
  } else {
    for (Index i = 0; i < weights.size(); ++i) weights[i] = static_cast<S>(rng.uniform(-1.0, 1.0));
  }
  Var<S> loss = sum(mul(out, tape.constant(weights)));
  tape.backward(loss);

  auto evaluate = [&](const std::vector<Tensor<S>>& probe) {
    Tape<S> t;
    std::vector<Var<S>> v;
    for (const auto& x : probe) v.push_back(t.leaf(x, false));
    return projected(f(t, v).value(), weights);
  };

  GradCheckReport report;
  std::vector<Tensor<S>> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!wants(i)) continue;
    const Tensor<S> grad = vars[i].grad();
    std::vector<Index> elements(static_cast<std::size_t>(inputs[i].size()));
    std::iota(elements.begin(), elements.end(), Index{0});
    if (options.probes_per_input > 0 && options.probes_per_input < inputs[i].size()) {
      for (Index k = 0; k < options.probes_per_input; ++k) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(k, inputs[i].size() - 1));
        std::swap(elements[static_cast<std::size_t>(k)], elements[j]);
      }
      elements.resize(static_cast<std::size_t>(options.probes_per_input));
    }
    for (Index e : elements) {
      const S original = inputs[i][e];
      probe[i][e] = original + static_cast<S>(options.step);
      const double plus = evaluate(probe);
      probe[i][e] = original - static_cast<S>(options.step);
      const double minus = evaluate(probe);
      probe[i][e] = original;
      GradProbe p;
      p.input = i;
      p.element = e;
      p.analytic = grad[e];
      p.numeric = (plus - minus) / (2.0 * options.step);
      p.rel_error = std::abs(p.analytic - p.numeric) / std::max({std::abs(p.analytic), std::abs(p.numeric), 1e-8});
      p.pass = p.rel_error <= options.tolerance;
      report.probes.push_back(p);
    }
  }
  return report;
}

template GradCheckReport finite_difference_check(const TapeFunction<float>&, const std::vector<Tensor<float>>&,
                                                 const GradCheckOptions&);
template GradCheckReport finite_difference_check(const TapeFunction<double>&, const std::vector<Tensor<double>>&,
                                                 const GradCheckOptions&);

}  // namespace saan
