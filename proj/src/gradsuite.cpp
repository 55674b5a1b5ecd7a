#include "muslcat/gradsuite.hpp"

#include <algorithm>
#include <functional>
#include <memory>

#include "muslcat/attention.hpp"
#include "muslcat/errors.hpp"
#include "muslcat/layers.hpp"
#include "muslcat/model.hpp"
#include "muslcat/random.hpp"

namespace muslcat {

namespace {

Tensor normal_input(const Shape& s, std::uint64_t seed) {
  Rng rng(seed);
  return random_normal(s, rng);
}

// |v| >= 0.1 so elementwise kinks stay out of the eps window.
Tensor clear_of_zero(const Shape& s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(s);
  std::uniform_real_distribution<double> mag(0.1, 1.1);
  std::bernoulli_distribution sign(0.5);
  for (double& v : t.values()) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

// Shuffled grid with spacing 0.01: no pooling window holds a tie.
Tensor tie_free(const Shape& s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(s);
  std::vector<double> grid(t.size());
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = -1.0 + 0.01 * double(i);
  std::shuffle(grid.begin(), grid.end(), rng);
  std::copy(grid.begin(), grid.end(), t.data());
  return t;
}

struct Case {
  Shape shape;
  std::function<std::unique_ptr<Module>(Rng&)> make;
  Tensor (*input)(const Shape&, std::uint64_t) = normal_input;
  Mode mode = Mode::kTrain;
};

std::unique_ptr<Module> mha(std::size_t cin, std::size_t heads, std::size_t dk, std::size_t dv, std::size_t dmax,
                            bool relative, Rng& rng) {
  MHAParams p = make_mha(cin, heads, dk, dv, dmax, rng);
  if (relative) fill_normal(p.rel.value, rng, 0.0, 0.5);
  return std::make_unique<MultiHeadAttention>(std::move(p), relative);
}

std::unique_ptr<Module> aac(std::size_t cin, std::size_t cout, std::size_t heads, double k, double v, Rng& rng) {
  AACConfig c;
  c.in_channels = cin;
  c.out_channels = cout;
  c.heads = heads;
  c.key_ratio = k;
  c.value_ratio = v;
  c.max_distance = 2;
  auto b = std::make_unique<AACBlock>(c, rng);
  fill_normal(b->attention().params().rel.value, rng, 0.0, 0.5);
  return b;
}

const std::vector<std::pair<std::string, std::vector<Case>>>& suite() {
  static const std::vector<std::pair<std::string, std::vector<Case>>> s = {
      {"conv1d",
       {{{1, 1, 12}, [](Rng& r) { return std::make_unique<Conv1d>(1, 2, 3, 3, 0, r); }},
        {{2, 3, 9}, [](Rng& r) { return std::make_unique<Conv1d>(3, 4, 5, 1, 2, r); }},
        {{3, 2, 60}, [](Rng& r) { return std::make_unique<Conv1d>(2, 3, 27, 9, 0, r); }}}},
      {"maxpool",
       {{{1, 1, 9}, [](Rng&) { return std::make_unique<MaxPool1d>(3, 3); }, tie_free},
        {{2, 3, 10}, [](Rng&) { return std::make_unique<MaxPool1d>(3, 3); }, tie_free},
        {{2, 2, 7}, [](Rng&) { return std::make_unique<MaxPool1d>(2, 2); }, tie_free}}},
      {"relu",
       {{{7}, [](Rng&) { return std::make_unique<ReLU>(); }, clear_of_zero},
        {{2, 3, 4}, [](Rng&) { return std::make_unique<ReLU>(); }, clear_of_zero},
        {{3, 5}, [](Rng&) { return std::make_unique<ReLU>(); }, clear_of_zero}}},
      {"gelu",
       {{{7}, [](Rng&) { return std::make_unique<GELU>(); }},
        {{2, 3, 4}, [](Rng&) { return std::make_unique<GELU>(); }},
        {{3, 5}, [](Rng&) { return std::make_unique<GELU>(); }}}},
      {"sigmoid",
       {{{7}, [](Rng&) { return std::make_unique<Sigmoid>(); }},
        {{2, 3, 4}, [](Rng&) { return std::make_unique<Sigmoid>(); }},
        {{3, 5}, [](Rng&) { return std::make_unique<Sigmoid>(); }}}},
      {"dense",
       {{{4, 3}, [](Rng& r) { return std::make_unique<Dense>(3, 5, r); }},
        {{2, 5, 3}, [](Rng& r) { return std::make_unique<Dense>(3, 4, r); }},
        {{1, 8}, [](Rng& r) { return std::make_unique<Dense>(8, 2, r, false); }}}},
      {"batchnorm",
       {{{2, 3, 5}, [](Rng&) { return std::make_unique<BatchNorm1d>(3); }},
        {{4, 2, 3}, [](Rng&) { return std::make_unique<BatchNorm1d>(2); }},
        {{3, 4, 6}, [](Rng&) { return std::make_unique<BatchNorm1d>(4); }, normal_input, Mode::kEval}}},
      {"layernorm",
       {{{2, 5, 3}, [](Rng&) { return std::make_unique<LayerNorm>(5, 1); }},
        {{3, 4, 6}, [](Rng&) { return std::make_unique<LayerNorm>(6, 2); }},
        {{1, 8, 2}, [](Rng&) { return std::make_unique<LayerNorm>(8, 1); }}}},
      {"se",
       {{{1, 4, 5},
         [](Rng& r) {
           auto s = std::make_unique<SEBlock>(4, 2, r);
           s->squeeze_fc().bias().value.fill(0.3);  // keep squeeze units off the ReLU kink
           return s;
         }},
        {{2, 8, 3},
         [](Rng& r) {
           auto s = std::make_unique<SEBlock>(8, 4, r);
           s->squeeze_fc().bias().value.fill(0.3);
           return s;
         }},
        {{3, 16, 4}, [](Rng& r) {
           auto s = std::make_unique<SEBlock>(16, 16, r);
           s->squeeze_fc().bias().value.fill(0.3);
           return s;
         }}}},
      {"mha_relative",
       {{{1, 6, 4}, [](Rng& r) { return mha(4, 1, 4, 4, 8, true, r); }},
        {{2, 6, 4}, [](Rng& r) { return mha(4, 2, 4, 4, 2, true, r); }},
        {{2, 9, 3}, [](Rng& r) { return mha(3, 2, 6, 2, 3, true, r); }}}},
      {"mha_absolute_free",
       {{{1, 6, 4}, [](Rng& r) { return mha(4, 1, 4, 4, 8, false, r); }},
        {{2, 6, 4}, [](Rng& r) { return mha(4, 2, 4, 4, 2, false, r); }},
        {{2, 9, 3}, [](Rng& r) { return mha(3, 2, 6, 2, 3, false, r); }}}},
      {"aac_block",
       {{{1, 4, 5}, [](Rng& r) { return aac(4, 8, 2, 0.5, 0.5, r); }},
        {{2, 3, 6}, [](Rng& r) { return aac(3, 8, 2, 0.25, 0.25, r); }},
        {{2, 6, 4}, [](Rng& r) { return aac(6, 16, 4, 0.25, 0.5, r); }}}},
      {"encoder_layer",
       {{{1, 3, 8}, [](Rng& r) { return std::make_unique<EncoderLayer>(8, 2, 16, 0.0, 4, r, 1); }},
        {{2, 5, 8}, [](Rng& r) { return std::make_unique<EncoderLayer>(8, 4, 8, 0.0, 2, r, 2); }},
        {{2, 4, 12}, [](Rng& r) { return std::make_unique<EncoderLayer>(12, 3, 24, 0.0, 8, r, 3); }}}},
  };
  return s;
}

}  // namespace

std::vector<std::string> gradcheck_module_names() {
  std::vector<std::string> out;
  for (const auto& [name, cases] : suite()) out.push_back(name);
  return out;
}

std::vector<SuiteEntry> run_gradcheck_suite(const std::string& module, std::uint64_t seed) {
  const auto names = gradcheck_module_names();
  if (!module.empty() && std::find(names.begin(), names.end(), module) == names.end()) {
    std::string known;
    for (const auto& n : names) known += (known.empty() ? "" : ", ") + n;
    throw ValidationError("unknown module '" + module + "'; known: " + known);
  }
  std::vector<SuiteEntry> out;
  std::uint64_t k = 0;
  for (const auto& [name, cases] : suite()) {
    if (!module.empty() && name != module) continue;
    for (const Case& c : cases) {
      ++k;
      Rng rng(derive_seed(seed, k));
      auto m = c.make(rng);
      const Tensor x = c.input(c.shape, derive_seed(seed, 1000 + k));
      GradCheckOptions o;
      o.max_samples = 0;
      o.seed = derive_seed(seed, 2000 + k);
      out.push_back({name, shape_str(c.shape), check_module(name, *m, x, c.mode, o)});
    }
  }
  return out;
}

}  // namespace muslcat
