// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "iclmt/contextizer.hpp"
#include "iclmt/embedder.hpp"
#include "iclmt/evaluator.hpp"
#include "iclmt/knn_index.hpp"
#include "iclmt/model.hpp"
#include "iclmt/pipeline.hpp"
#include "iclmt/trainer.hpp"
#include "iclmt/util.hpp"
#include "json.hpp"

using namespace iclmt;
namespace fs = std::filesystem;

namespace {

const fs::path kData = ICLMT_DATA_DIR;
const fs::path kWork = ICLMT_WORK_DIR;

// tests/oracles/bleu_reference.py data/bleu_fixture.json
constexpr double kFixtureBleu = 65.897505;

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail += (detail.empty() ? "" : "; ") + what;
        }
    }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

std::shared_ptr<const VectorSet> random_vectors(std::size_t n, std::size_t dim, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> data(n * dim);
    for (auto& v : data) {
        v = static_cast<float>(rng.normal());
    }
    return std::make_shared<const VectorSet>(dim, std::move(data));
}

// ---------------------------------------------------------------------------

Outcome criterion1() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(1);
    for (int t = 0; t < 100; ++t) {
        std::vector<float> a(16);
        for (auto& v : a) {
            v = static_cast<float>(rng.normal());
        }
        o.require(std::abs(cosine_distance(a, a)) <= 1e-12, "d(a,a) != 0");
    }
    std::vector<float> x{1, 0}, y{0, 1}, xy{1, 1};
    o.require(cosine_distance(x, y) == 1.0, "d((1,0),(0,1)) != 1");
    const double d = cosine_distance(x, xy);
    o.require(std::abs(d - (1.0 - 1.0 / std::sqrt(2.0))) <= 1e-9, "d((1,0),(1,1)) = " + fmt("%.12f", d));
    const double secs = seconds_since(t0);
    o.require(secs < 1.0, "runtime " + fmt("%.3f s", secs));
    o.detail = o.pass ? "d((1,0),(1,1)) = " + fmt("%.12f", d) : o.detail;
    return o;
}

Outcome criterion2() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();

    // Exact search vs enumerating and fully sorting every distance (long double).
    auto small = random_vectors(1000, 24, 2);
    auto queries = random_vectors(100, 24, 3);
    std::size_t mismatches = 0;
    for (std::size_t qi = 0; qi < queries->size(); ++qi) {
        auto q = queries->row(qi);
        std::vector<std::pair<long double, std::uint64_t>> all;
        for (std::size_t i = 0; i < small->size(); ++i) {
            auto r = small->row(i);
            long double dot = 0, nq = 0, nr = 0;
            for (std::size_t j = 0; j < q.size(); ++j) {
                dot += static_cast<long double>(q[j]) * r[j];
                nq += static_cast<long double>(q[j]) * q[j];
                nr += static_cast<long double>(r[j]) * r[j];
            }
            all.emplace_back(1.0L - dot / std::sqrt(nq * nr), i);
        }
        std::sort(all.begin(), all.end());
        for (std::size_t k : {1, 2, 5}) {
            auto got = exact_knn(*small, q, k);
            bool same = got.neighbors.size() == k;
            for (std::size_t i = 0; same && i < k; ++i) {
                same = got.neighbors[i].pair_id == all[i].second &&
                       std::abs(got.neighbors[i].distance - static_cast<double>(all[i].first)) <= 1e-12;
            }
            mismatches += same ? 0 : 1;
        }
    }
    o.require(mismatches == 0, std::to_string(mismatches) + " exact/full-sort mismatches");

    auto big = random_vectors(10000, 16, 4);
    auto index = KnnIndex::build(big, IndexConfig{});
    auto probes = random_vectors(200, 16, 5);
    std::size_t hits = 0;
    const std::size_t k = IndexConfig{}.k;
    for (std::size_t qi = 0; qi < probes->size(); ++qi) {
        auto approx = index.query(probes->row(qi), k);
        auto exact = exact_knn(*big, probes->row(qi), k);
        std::set<std::uint64_t> truth;
        for (const auto& n : exact.neighbors) {
            truth.insert(n.pair_id);
        }
        for (const auto& n : approx.neighbors) {
            hits += truth.count(n.pair_id);
        }
    }
    const double recall = double(hits) / double(k * probes->size());
    o.require(recall >= 0.95, "recall@" + std::to_string(k) + " " + fmt("%.4f", recall));
    const double secs = seconds_since(t0);
    o.require(secs < 60.0, "runtime " + fmt("%.1f s", secs));
    if (o.pass) {
        o.detail = "recall@" + std::to_string(k) + " = " + fmt("%.4f", recall) + " on 10000 vectors, " +
                   fmt("%.1f s", secs);
    }
    return o;
}

Outcome criterion3() {
    Outcome o;
    auto toks = reserved_tokens();
    for (int i = 0; i < 40; ++i) {
        toks.push_back("w" + std::to_string(i));
    }
    Vocabulary vocab(toks);
    Rng rng(3);
    auto sentence = [&] {
        std::vector<std::string> words(1 + rng.below(6));
        std::string s;
        for (auto& w : words) {
            w = "w" + std::to_string(rng.below(40));
            s += (s.empty() ? "" : " ") + w;
        }
        return std::make_pair(s, words);
    };
    auto ids = [&](const std::vector<std::string>& words) {
        TokenIds out;
        for (const auto& w : words) {
            out.push_back(vocab.id(w));
        }
        return out;
    };
    std::size_t bad = 0;
    for (int f = 0; f < 200; ++f) {
        const std::size_t k = 1 + rng.below(5);
        auto [qs, qsw] = sentence();
        auto [qt, qtw] = sentence();
        ContextExample ex{{static_cast<std::uint64_t>(f), qs, qt}, {}};
        struct Ref {
            double distance;
            std::uint64_t id;
            std::vector<std::string> src, tgt;
        };
        std::vector<Ref> refs;
        for (std::size_t i = 0; i < k; ++i) {
            auto [ns, nsw] = sentence();
            auto [nt, ntw] = sentence();
            // Quantized distances give ties; ids are distinct.
            const double dist = 0.125 * double(rng.below(6));
            const std::uint64_t id = 1000 + 7 * i + rng.below(7);
            ex.neighbors.push_back({{id, ns, nt}, dist});
            refs.push_back({dist, id, nsw, ntw});
        }
        // Retrieval order is ascending (distance, id); s_1 is the first.
        std::sort(refs.begin(), refs.end(),
                  [](const Ref& a, const Ref& b) { return a.distance < b.distance || (a.distance == b.distance && a.id < b.id); });
        rng.shuffle(ex.neighbors);

        // Stage 0 encoder: <bos> s_k ... s_1 s <eos>
        TokenIds enc0{kBos};
        for (std::size_t i = k; i-- > 0;) {
            auto part = ids(refs[i].src);
            enc0.insert(enc0.end(), part.begin(), part.end());
        }
        auto qsi = ids(qsw);
        enc0.insert(enc0.end(), qsi.begin(), qsi.end());
        enc0.push_back(kEos);
        auto s0 = serialize_stage0(ex, vocab);
        bool ok = s0.encoder_ids == enc0;

        // Stage 2 decoder: <bos> t_k <sep> ... t_1 <sep> t <eos>
        TokenIds dec2{kBos};
        for (std::size_t i = k; i-- > 0;) {
            auto part = ids(refs[i].tgt);
            dec2.insert(dec2.end(), part.begin(), part.end());
            dec2.push_back(kSep);
        }
        const std::size_t prefix = dec2.size();
        auto qti = ids(qtw);
        dec2.insert(dec2.end(), qti.begin(), qti.end());
        dec2.push_back(kEos);
        auto s2b = serialize_stage2(ex, vocab, true);
        auto s2a = serialize_stage2(ex, vocab, false);
        ok = ok && s2b.decoder_ids == dec2 && s2a.decoder_ids == dec2;

        auto pre = inference_prefix(ex, vocab, PrefixStyle::stage2);
        ok = ok && pre.decoder_prefix.size() == prefix && pre.decoder_prefix.back() == kSep &&
             std::equal(pre.decoder_prefix.begin(), pre.decoder_prefix.end(), dec2.begin());

        const auto mask_sum = std::count(s2b.loss_mask.begin(), s2b.loss_mask.end(), 1);
        ok = ok && static_cast<std::size_t>(mask_sum) == qtw.size() + 1;
        ok = ok && std::count(s2a.loss_mask.begin(), s2a.loss_mask.end(), 1) ==
                       static_cast<std::ptrdiff_t>(dec2.size() - 1);
        bad += ok ? 0 : 1;
    }
    o.require(bad == 0, std::to_string(bad) + " of 200 fixtures violate a contract");
    if (o.pass) {
        o.detail = "200 randomized fixtures, k in 1..5";
    }
    return o;
}

// Index of the validation after which training stops, or -1. Direct reading
// of the rule: a validation fails when it is not at least `gap` below the
// best earlier loss; stop at the second failure in a row.
int brute_force_stop(const std::vector<double>& trace, double gap) {
    bool prev_fail = false;
    for (std::size_t i = 1; i < trace.size(); ++i) {
        const double best = *std::min_element(trace.begin(), trace.begin() + static_cast<std::ptrdiff_t>(i));
        const bool fail = best - trace[i] < gap;
        if (fail && prev_fail) {
            return static_cast<int>(i);
        }
        prev_fail = fail;
    }
    return -1;
}

int machine_stop(const std::vector<double>& trace, const StoppingPolicy& pol) {
    StoppingState s;
    for (std::size_t i = 0; i < trace.size(); ++i) {
        auto d = should_stop(pol, s, trace[i]);
        s = d.state;
        if (d.stop) {
            return static_cast<int>(i);
        }
    }
    return -1;
}

Outcome criterion4() {
    Outcome o;
    const auto pol = StoppingPolicy::aggressive();
    const int stop = machine_stop({2.0, 1.85, 1.80, 1.78}, pol);
    o.require(stop == 3, "reference trace stops at validation " + std::to_string(stop + 1));
    Rng rng(4);
    std::size_t disagree = 0, stopped = 0;
    for (int t = 0; t < 1000; ++t) {
        std::vector<double> trace{1.0 + rng.uniform() * 3.0};
        const std::size_t n = 2 + rng.below(25);
        while (trace.size() < n) {
            // Mix of clear drops, marginal drops and rises.
            const double step = rng.below(4) == 0 ? 0.1 : (rng.uniform() * 0.4 - 0.15);
            trace.push_back(trace.back() - step);
        }
        const int a = machine_stop(trace, pol);
        const int b = brute_force_stop(trace, 0.1);
        disagree += a == b ? 0 : 1;
        stopped += a >= 0 ? 1 : 0;
    }
    o.require(disagree == 0, std::to_string(disagree) + " of 1000 random traces disagree");
    if (o.pass) {
        o.detail = "reference trace stops after validation 4; 1000 random traces agree (" +
                   std::to_string(stopped) + " stop)";
    }
    return o;
}

std::string array_class(const std::string& name) {
    if (name.find(".adapter.") != std::string::npos) {
        return "adapter";
    }
    if (name.ends_with("embed")) {
        return "embedding";
    }
    if (name.starts_with("out.")) {
        return "output";
    }
    if (name.find(".ln") != std::string::npos || name.find(".final.") != std::string::npos) {
        return "layer_norm";
    }
    if (name.find(".ffn.") != std::string::npos) {
        return "feed_forward";
    }
    if (name.ends_with(".bk")) {
        return "key_bias";
    }
    const auto tail = name.substr(name.rfind('.') + 1);
    return tail.starts_with("b") ? "attention_bias" : "attention_weight";
}

Outcome criterion5() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    ModelConfig c;
    c.encoder_layers = 2;
    c.decoder_layers = 2;
    c.model_dim = 8;
    c.ffn_dim = 16;
    c.heads = 2;
    c.max_input = 32;
    c.vocab_size = 24;
    auto p = inject_adapters(init_model(c, 5), AdapterConfig{4}, 6);
    Rng rng(7);
    for (auto& a : p.arrays()) {
        a.trainable = true;
        // Move off the zero-initialized point so adapter paths carry signal.
        if (a.adapter) {
            for (Eigen::Index i = 0; i < a.value.size(); ++i) {
                a.value.data()[i] += 0.3 * rng.normal();
            }
        }
    }
    const TokenIds enc{1, 5, 9, 13, 3, 17, 6, 2};
    const TokenIds dec{1, 7, 11, 3, 19, 8, 21, 2};
    const std::vector<std::uint8_t> mask{0, 0, 0, 1, 1, 1, 1};
    auto grads = zero_gradients(p);
    loss_and_gradients(p, enc, dec, mask, grads);
    auto loss = [&] {
        auto scratch = zero_gradients(p);
        return loss_and_gradients(p, enc, dec, mask, scratch).nll_sum;
    };

    std::map<std::string, std::vector<std::size_t>> classes;
    for (std::size_t i = 0; i < p.arrays().size(); ++i) {
        classes[array_class(p.arrays()[i].name)].push_back(i);
    }
    std::set<TokenId> enc_tokens(enc.begin(), enc.end()), dec_tokens(dec.begin(), dec.end());
    std::string summary;
    for (const auto& [cls, members] : classes) {
        double worst = 0.0;
        int checked = 0;
        for (int t = 0; t < 24; ++t) {
            const std::size_t ai = members[rng.below(members.size())];
            auto& a = p.arrays()[ai];
            Eigen::Index idx;
            if (cls == "embedding") {
                // Only rows of tokens that occur in the fixture can have a gradient.
                const auto& used = a.name.starts_with("enc") ? enc_tokens : dec_tokens;
                auto it = used.begin();
                std::advance(it, static_cast<std::ptrdiff_t>(rng.below(used.size())));
                const auto col = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(a.value.cols())));
                idx = col * a.value.rows() + *it;
            } else {
                idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(a.value.size())));
            }
            const double orig = a.value.data()[idx];
            const double h = 1e-5;
            a.value.data()[idx] = orig + h;
            const double lp = loss();
            a.value.data()[idx] = orig - h;
            const double lm = loss();
            a.value.data()[idx] = orig;
            const double num = (lp - lm) / (2 * h);
            const double an = grads[ai].data()[idx];
            ++checked;
            if (cls == "key_bias") {
                // Softmax is invariant to a per-query constant, so the exact gradient is 0.
                worst = std::max({worst, std::abs(an), std::abs(num)});
                o.require(std::abs(an) <= 1e-9 && std::abs(num) <= 1e-8, a.name + " key bias gradient not zero");
                continue;
            }
            const double rel = std::abs(num - an) / std::max({std::abs(num), std::abs(an), 1e-7});
            worst = std::max(worst, rel);
            o.require(rel <= 1e-4, a.name + " rel err " + fmt("%.2e", rel));
        }
        o.require(checked >= 20, cls + " has fewer than 20 checks");
        summary += (summary.empty() ? "" : ", ") + cls + (cls == "key_bias" ? " max|g| " : " ") + fmt("%.1e", worst);
    }
    const double secs = seconds_since(t0);
    o.require(secs < 120.0, "runtime " + fmt("%.1f s", secs));
    o.require(classes.count("adapter") == 1, "no adapter arrays");
    if (o.pass) {
        o.detail = "worst relative error per class: " + summary;
    }
    return o;
}

Outcome criterion6() {
    Outcome o;
    ModelConfig c;
    c.encoder_layers = 2;
    c.decoder_layers = 2;
    c.model_dim = 16;
    c.ffn_dim = 32;
    c.heads = 2;
    c.max_input = 48;
    c.vocab_size = 40;
    const fs::path dir = kWork / "criterion6";
    fs::create_directories(dir);
    save_checkpoint(dir / "parent.ckpt", init_model(c, 8));
    const auto parent = load_checkpoint(dir / "parent.ckpt");

    auto child = inject_adapters(parent, AdapterConfig{8}, 9);
    Rng rng(10);
    std::vector<EncodedSample> data;
    double max_logit_diff = 0.0;
    for (int i = 0; i < 40; ++i) {
        EncodedSample s;
        s.stage = SampleStage::stage2a;
        s.encoder_ids = {kBos};
        s.decoder_ids = {kBos};
        const std::size_t n = 2 + rng.below(8);
        for (std::size_t j = 0; j < n; ++j) {
            s.encoder_ids.push_back(static_cast<TokenId>(kReservedCount + rng.below(35)));
            s.decoder_ids.push_back(static_cast<TokenId>(kReservedCount + rng.below(35)));
        }
        s.encoder_ids.push_back(kEos);
        s.decoder_ids.push_back(kEos);
        s.loss_mask.assign(s.decoder_ids.size() - 1, 1);
        data.push_back(s);
        Matrix a = forward(parent, s.encoder_ids, s.decoder_ids);
        Matrix b = forward(child, s.encoder_ids, s.decoder_ids);
        max_logit_diff = std::max(max_logit_diff, (a - b).cwiseAbs().maxCoeff());
    }
    o.require(max_logit_diff <= 1e-9, "zero-init adapter changes log-probs by " + fmt("%.2e", max_logit_diff));

    auto cfg = default_train_config(TrainStage::stage1);
    cfg.batch_size = 4;
    cfg.max_steps = 50;
    cfg.learning_rate = 3e-3;
    auto res = train_stage(child, data, {}, cfg);
    o.require(res.steps == 50, "ran " + std::to_string(res.steps) + " steps");
    save_checkpoint(dir / "child.ckpt", res.params);
    const auto reloaded = load_checkpoint(dir / "child.ckpt");

    std::size_t base_arrays = 0, changed_adapters = 0;
    for (const auto& pa : parent.arrays()) {
        for (const ModelParams* m : {static_cast<const ModelParams*>(&res.params), &reloaded}) {
            const auto& ca = m->get(pa.name);
            const bool same = ca.value.rows() == pa.value.rows() && ca.value.cols() == pa.value.cols() &&
                              std::memcmp(ca.value.data(), pa.value.data(),
                                          sizeof(double) * static_cast<std::size_t>(pa.value.size())) == 0;
            o.require(same, pa.name + " changed");
        }
        ++base_arrays;
    }
    for (const auto& a : res.params.arrays()) {
        if (a.adapter && a.value != child.get(a.name).value) {
            ++changed_adapters;
        }
    }
    o.require(changed_adapters > 0, "adapters did not train");
    if (o.pass) {
        o.detail = std::to_string(base_arrays) + " base arrays bit-identical after 50 steps (" +
                   std::to_string(changed_adapters) + " adapter arrays updated); step-0 max |diff| " +
                   fmt("%.1e", max_logit_diff);
    }
    return o;
}

nlohmann::json report(const fs::path& work, const std::string& system) {
    return nlohmann::json::parse(read_file(work / "reports" / "domain" / (system + ".json")));
}

PipelineConfig desk_config(const fs::path& work) {
    auto cfg = load_pipeline_config(kData / "pipeline_desk.json");
    cfg.work_dir = work;
    return cfg;
}

Outcome criterion7(double& runtime) {
    Outcome o;
    const fs::path work = kWork / "desk_a";
    fs::remove_all(work);
    const auto t0 = std::chrono::steady_clock::now();
    run_pipeline(desk_config(work));
    runtime = seconds_since(t0);

    const auto s0 = report(work, "stage0.k1");
    const auto s1 = report(work, "stage1.k0");
    const auto s2b = report(work, "stage2b.k1");
    const auto s3 = report(work, "stage3.k1");
    const auto base = report(work, "baseline.k0");
    const double bleu0 = s0["bleu"], bleu2b = s2b["bleu"];
    const double wsa3 = s3["wsa"], wsa1 = s1["wsa"], wsab = base["wsa"];
    const double er0 = s0["empty_rate"], er2b = s2b["empty_rate"];
    o.require(bleu2b >= bleu0 + 5.0, "(a) BLEU stage2b " + fmt("%.2f", bleu2b) + " vs stage0 " + fmt("%.2f", bleu0));
    o.require(wsa3 > wsa1 && wsa1 > wsab,
              "(b) WSA " + fmt("%.3f", wsa3) + " / " + fmt("%.3f", wsa1) + " / " + fmt("%.3f", wsab));
    o.require(er2b < er0, "(c) empty rate stage2b " + fmt("%.3f", er2b) + " vs stage0 " + fmt("%.3f", er0));
    o.require(runtime < 900.0, "runtime " + fmt("%.0f s", runtime));
    if (o.pass) {
        o.detail = "BLEU 2b/0 " + fmt("%.2f", bleu2b) + "/" + fmt("%.2f", bleu0) + "; WSA 3/1/base " +
                   fmt("%.3f", wsa3) + "/" + fmt("%.3f", wsa1) + "/" + fmt("%.3f", wsab) + "; empty 2b/0 " +
                   fmt("%.3f", er2b) + "/" + fmt("%.3f", er0) + "; " + fmt("%.0f s", runtime);
    }
    return o;
}

Outcome criterion8() {
    Outcome o;
    auto fx = nlohmann::json::parse(read_file(kData / "bleu_fixture.json"));
    auto hyps = fx["hypotheses"].get<std::vector<std::string>>();
    auto refs = fx["references"].get<std::vector<std::string>>();
    const double b = corpus_bleu(hyps, refs);
    o.require(std::abs(b - kFixtureBleu) <= 0.01, "fixture BLEU " + fmt("%.6f", b));
    o.require(corpus_bleu(refs, refs) == 100.0, "identity BLEU " + fmt("%.6f", corpus_bleu(refs, refs)));
    std::vector<std::string> h{"alpha beta gamma delta"}, r{"one two three four"};
    o.require(corpus_bleu(h, r) == 0.0, "disjoint BLEU not 0");
    if (o.pass) {
        o.detail = "fixture " + fmt("%.6f", b) + " vs reference " + fmt("%.6f", kFixtureBleu);
    }
    return o;
}

Outcome criterion9() {
    Outcome o;
    std::vector<NeighborList> fx{{0, {{4, 0.1}, {7, 0.3}}},
                                 {1, {{2, 0.2}, {9, 0.4}}},
                                 {2, {{3, 0.05}, {1, 0.15}}},
                                 {3, {{5, 0.5}}}};
    // (0.2 + 0.3 + 0.1) / 3 with query 3 skipped (only one neighbor).
    const double hand2 = (0.6 / 3.0);
    const double hand1 = (0.1 + 0.2 + 0.05 + 0.5) / 4.0;
    auto d2 = avg_knn_distance(fx, 2);
    auto d1 = avg_knn_distance(fx, 1);
    o.require(std::abs(d2.mean - hand2) <= 1e-12 && d2.skipped == 1, "k=2 mean " + fmt("%.15f", d2.mean));
    o.require(std::abs(d1.mean - hand1) <= 1e-12, "k=1 mean " + fmt("%.15f", d1.mean));
    std::vector<double> x{0.13, 0.3, 0.21, 0.05, 0.44}, up, down;
    for (double v : x) {
        up.push_back(2 * v);
        down.push_back(-2 * v);
    }
    const double rp = pearson(x, up), rn = pearson(x, down);
    o.require(std::abs(rp - 1.0) <= 1e-12, "r(y=2x) " + fmt("%.15f", rp));
    o.require(std::abs(rn + 1.0) <= 1e-12, "r(y=-2x) " + fmt("%.15f", rn));
    if (o.pass) {
        o.detail = "avg distance k=2 " + fmt("%.4f", d2.mean) + ", k=1 " + fmt("%.4f", d1.mean) + "; r = " +
                   fmt("%.1f", rp) + ", " + fmt("%.1f", rn);
    }
    return o;
}

std::map<std::string, std::string> file_hashes(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) {
            out[fs::relative(e.path(), root).generic_string()] = hash_file(e.path());
        }
    }
    return out;
}

Outcome criterion10() {
    Outcome o;
    // Run A is the one criterion 7 produced; B is a second fresh run.
    const fs::path a = kWork / "desk_a";
    const fs::path b = kWork / "desk_b";
    fs::remove_all(b);
    auto rb = run_pipeline(desk_config(b));
    o.require(rb.skipped == 0, "second run was not fresh");

    auto ha = file_hashes(a);
    auto hb = file_hashes(b);
    std::size_t checkpoints = 0, reports = 0, differing = 0;
    for (const auto& [rel, h] : ha) {
        auto it = hb.find(rel);
        if (it == hb.end() || it->second != h) {
            ++differing;
            o.require(false, rel + " differs");
        }
        checkpoints += rel.starts_with("checkpoints/") ? 1 : 0;
        reports += rel.starts_with("reports/") ? 1 : 0;
    }
    o.require(ha.size() == hb.size(), "artifact sets differ");
    o.require(checkpoints > 0 && reports > 0, "no checkpoints or reports found");

    auto rc = run_pipeline(desk_config(a));
    o.require(rc.executed == 0, "third run executed " + std::to_string(rc.executed) + " steps");
    o.require(file_hashes(a) == ha, "third run modified artifacts");
    if (o.pass) {
        o.detail = std::to_string(ha.size()) + " artifacts byte-identical (" + std::to_string(checkpoints) +
                   " checkpoints, " + std::to_string(reports) + " reports); third run skipped " +
                   std::to_string(rc.skipped) + " of " + std::to_string(rc.steps.size()) + " steps";
    }
    return o;
}

}  // namespace

int main() {
    fs::create_directories(kWork);
    double desk_runtime = 0.0;
    std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"cosine distance", criterion1},
        {"retrieval oracle equivalence", criterion2},
        {"serialization contracts", criterion3},
        {"early stopping", criterion4},
        {"gradient correctness", criterion5},
        {"freezing and adapters", criterion6},
        {"direction of effect", [&] { return criterion7(desk_runtime); }},
        {"BLEU oracle", criterion8},
        {"distance and correlation machinery", criterion9},
        {"pipeline determinism and idempotence", criterion10},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("exception: ") + e.what();
        }
        failures += o.pass ? 0 : 1;
        std::printf("criterion %2zu %-4s %s: %s\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                    o.detail.c_str());
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
