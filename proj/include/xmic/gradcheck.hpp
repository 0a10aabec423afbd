#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "xmic/nn.hpp"
#include "xmic/tensor.hpp"

namespace xmic {

struct GradCheckEntry {
    std::string name;
    Scalar max_rel_err = 0.0;
    std::size_t worst_index = 0;
    Scalar analytic = 0.0;
    Scalar numeric = 0.0;
};

struct GradCheckReport {
    Scalar max_rel_err = 0.0;
    Scalar tolerance = 0.0;
    bool pass = false;
    std::vector<GradCheckEntry> entries;

    const GradCheckEntry* worst() const {
        const GradCheckEntry* w = nullptr;
        for (const auto& e : entries)
            if (!w || e.max_rel_err > w->max_rel_err) w = &e;
        return w;
    }
};

// Central finite differences against the recorded backward pass. `f` must
// rebuild its graph from the current parameter values on every call.
inline GradCheckReport grad_check(const std::function<Tensor()>& f, const NamedParams& params,
                                  Scalar step = 1e-5, Scalar tolerance = 1e-6) {
    for (auto& [name, p] : params) {
        if (!p.requires_grad()) throw Error("grad_check parameter " + name + " has requires_grad=false");
        Tensor handle = p;  // handles share storage; clears the same grad buffer
        handle.zero_grad();
    }
    Tensor loss = f();
    backward(loss);

    std::vector<std::vector<Scalar>> analytic;
    analytic.reserve(params.size());
    for (auto& [name, p] : params) {
        if (!p.has_grad())
            throw Error("grad_check parameter " + name + " received no gradient (unreachable from loss)");
        analytic.push_back(p.grad());
    }

    GradCheckReport report;
    report.tolerance = tolerance;
    autograd::NoGradGuard guard;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor param = params[pi].second;
        GradCheckEntry entry;
        entry.name = params[pi].first;
        auto& values = param.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            Scalar saved = values[i];
            values[i] = saved + step;
            Scalar up = f().item();
            values[i] = saved - step;
            Scalar down = f().item();
            values[i] = saved;
            Scalar numeric = (up - down) / (2.0 * step);
            Scalar a = analytic[pi][i];
            Scalar rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            if (rel > entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    report.pass = report.max_rel_err < tolerance;
    return report;
}

}  // namespace xmic

#include "xmic/adapters.hpp"
#include "xmic/text_encoder.hpp"

namespace xmic {

// Checks every differentiable primitive plus the fully composed conditioning
// pipeline. Each entry rebuilds its graph from current parameter values, so
// the central differences see exactly the graph backward saw.
inline std::vector<std::pair<std::string, GradCheckReport>> full_grad_check_suite(
    std::uint64_t seed) {
    std::vector<std::pair<std::string, GradCheckReport>> out;
    auto check = [&](const std::string& name, const std::function<Tensor()>& f,
                     const NamedParams& params, Scalar tolerance) {
        out.emplace_back(name, grad_check(f, params, 1e-5, tolerance));
    };

    {
        Rng rng = make_rng(derive_seed(seed, 1));
        Tensor x = Tensor::randn({2, 3}, rng, 1.0, true);
        Tensor y = Tensor::randn({2, 3}, rng, 1.0, true);
        check("elementwise_chain",
              [&] { return sum(mul(add(x, scale(y, 0.5)), sub(x, neg(y)))); },
              {{"x", x}, {"y", y}}, 1e-6);
    }
    {
        Rng rng = make_rng(derive_seed(seed, 2));
        Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
        Tensor b = Tensor::randn({4, 2}, rng, 1.0, true);
        Tensor w = Tensor::randn({3, 4}, rng, 1.0, true);
        Tensor v = Tensor::randn({4}, rng, 1.0, true);
        check("matmul_matvec_dot",
              [&] { return add(sum(matmul(a, b)), dot(matvec(w, v), Tensor::full({3}, 0.7))); },
              {{"a", a}, {"b", b}, {"w", w}, {"v", v}}, 1e-6);
    }
    {
        Rng rng = make_rng(derive_seed(seed, 3));
        Tensor x = Tensor::randn({4, 6}, rng, 1.0, true);
        Tensor probe = Tensor::randn({6}, rng);
        check("normalize_pool",
              [&] { return dot(l2_normalize(mean_pool(l2_normalize(x))), probe); },
              {{"x", x}}, 1e-6);
    }
    {
        Rng rng = make_rng(derive_seed(seed, 4));
        Tensor x = Tensor::randn({3, 8}, rng, 1.0, true);
        Tensor gain = Tensor::randn({8}, rng, 0.2, true);
        Tensor bias = Tensor::randn({8}, rng, 0.2, true);
        Tensor probe = Tensor::randn({3, 8}, rng);
        check("layer_norm", [&] { return sum(mul(layer_norm(x, gain, bias), probe)); },
              {{"x", x}, {"gain", gain}, {"bias", bias}}, 1e-6);
    }
    {
        Rng rng = make_rng(derive_seed(seed, 5));
        Tensor x = Tensor::randn({3, 4}, rng, 1.0, true);
        Tensor w = Tensor::randn({4, 5}, rng, 1.0, true);
        check("quick_gelu", [&] { return sum(quick_gelu(matmul(x, w))); },
              {{"x", x}, {"w", w}}, 1e-6);
    }
    {
        Rng rng = make_rng(derive_seed(seed, 6));
        Tensor x = Tensor::randn({3, 5}, rng, 1.0, true);
        Tensor probe = Tensor::randn({3, 5}, rng);
        check("softmax_rows", [&] { return sum(mul(softmax_rows(x), probe)); }, {{"x", x}},
              1e-6);
    }
    {
        Rng rng = make_rng(derive_seed(seed, 7));
        Tensor queries_raw = Tensor::randn({2, 6}, rng, 1.0, true);
        Tensor rows_raw = Tensor::randn({4, 6}, rng, 1.0, true);
        std::vector<std::size_t> labels{1, 3};
        check("cosine_cross_entropy",
              [&] {
                  return cross_entropy(
                      cosine_logits(l2_normalize(queries_raw), l2_normalize(rows_raw), 0.05),
                      labels);
              },
              {{"queries", queries_raw}, {"rows", rows_raw}}, 1e-5);
    }
    {
        Rng rng = make_rng(derive_seed(seed, 8));
        TransformerBlockParams block = make_transformer_block(16, rng, /*zero_init=*/false);
        Tensor seq = Tensor::randn({3, 16}, rng, 1.0, true);
        Tensor probe = Tensor::randn({3, 16}, rng);
        // Raw attention only touches the QKV/output projections.
        NamedParams params{{"mha.Wq", block.Wq}, {"mha.bq", block.bq}, {"mha.Wk", block.Wk},
                           {"mha.bk", block.bk}, {"mha.Wv", block.Wv}, {"mha.bv", block.bv},
                           {"mha.Wo", block.Wo}, {"mha.bo", block.bo}, {"seq", seq}};
        check("multi_head_attention",
              [&] { return sum(mul(multi_head_attention(seq, block), probe)); }, params, 1e-5);
    }
    {
        Rng rng = make_rng(derive_seed(seed, 9));
        TransformerBlockParams block = make_transformer_block(16, rng, /*zero_init=*/false);
        Tensor seq = Tensor::randn({3, 16}, rng, 1.0, true);
        Tensor probe = Tensor::randn({3, 16}, rng);
        NamedParams params = block.named("block");
        params.emplace_back("seq", seq);
        check("transformer_block",
              [&] { return sum(mul(transformer_block(seq, block), probe)); }, params, 1e-5);
    }
    {
        Rng rng = make_rng(derive_seed(seed, 10));
        ToyTextEncoder encoder(16, derive_seed(seed, 1000));
        Tensor prompts = Tensor::randn({2, 16}, rng, 0.1, true);
        std::vector<std::string> names{"cut onion", "wash pan", "open door"};
        Tensor queries = Tensor::from({2, 16},
                                      [&] {
                                          std::vector<Scalar> q;
                                          for (int i = 0; i < 2; ++i) {
                                              auto u = draw_unit_vector(rng, 16);
                                              q.insert(q.end(), u.begin(), u.end());
                                          }
                                          return q;
                                      }());
        std::vector<std::size_t> labels{0, 2};
        check("prompt_encoding",
              [&] {
                  Tensor rows = encoder.encode_rows(names, prompts);
                  return cross_entropy(cosine_logits(queries, l2_normalize(rows), 0.05), labels);
              },
              {{"prompts", prompts}}, 1e-5);
    }
    {
        Rng rng = make_rng(derive_seed(seed, 11));
        const std::size_t d = 16, n = 3, c = 4, b = 2;
        XmicAdapter adapter = make_xmic_adapter(d, rng, /*zero_init=*/false);
        Tensor rows_raw = Tensor::randn({c, d}, rng);
        std::vector<Tensor> frames, hands, queries;
        for (std::size_t i = 0; i < b; ++i) {
            frames.push_back(Tensor::randn({n, d}, rng));
            hands.push_back(Tensor::randn({n, d}, rng));
            queries.push_back(Tensor::from({std::size_t{1}, d}, draw_unit_vector(rng, d)));
        }
        std::vector<std::size_t> labels{1, 2};
        check("composite_xmic_pipeline",
              [&] {
                  std::vector<Tensor> logit_rows;
                  for (std::size_t i = 0; i < b; ++i) {
                      Tensor a_v = xmic_forward(frames[i], hands[i], adapter);
                      Tensor adapted = condition_rows(rows_raw, a_v, adapter.alpha, adapter.norms);
                      logit_rows.push_back(cosine_logits(queries[i], adapted, 0.01));
                  }
                  return cross_entropy(concat_rows(logit_rows), labels);
              },
              adapter.named(), 1e-4);
    }
    return out;
}

}  // namespace xmic
