#include <cmath>

#include "doctest.h"
#include "iclmt/synthgen.hpp"
#include "iclmt/trainer.hpp"
#include "iclmt/util.hpp"

using namespace iclmt;

namespace {

struct Fixture {
    Vocabulary vocab;
    Corpus train;
    Corpus validation;
    ModelConfig model;
};

Fixture make_fixture() {
    FamilySamplerConfig sc;
    sc.families = 10;
    sc.values_per_family = 6;
    sc.min_words = 2;
    sc.max_words = 3;
    auto g = generate(sample_families(sc, default_slot_lexicon()), 2, SplitRatios{0.8, 0.1, 0.1});
    std::vector<Corpus> cs{g.train};
    Fixture f{build_vocab(cs, 500), g.train, g.validation, {}};
    f.model.encoder_layers = 1;
    f.model.decoder_layers = 1;
    f.model.model_dim = 16;
    f.model.ffn_dim = 32;
    f.model.heads = 2;
    f.model.max_input = 64;
    f.model.vocab_size = f.vocab.size();
    return f;
}

std::vector<EncodedSample> plain(const Corpus& c, const Vocabulary& v) {
    std::vector<EncodedSample> out;
    for (const auto& p : c.pairs) {
        out.push_back(serialize_plain(p, v));
    }
    return out;
}

// 1-shot samples pairing each item with the next one in the corpus.
std::vector<EncodedSample> one_shot(const Corpus& c, const Vocabulary& v, bool masked) {
    std::vector<EncodedSample> out;
    for (std::size_t i = 0; i < c.size(); ++i) {
        const auto& n = c.pairs[(i + 1) % c.size()];
        out.push_back(serialize_stage2(ContextExample{c.pairs[i], {{n, 0.5}}}, v, masked));
    }
    return out;
}

}  // namespace

TEST_CASE("nll of a uniform model is ln V") {
    const int V = 7;
    Matrix lp = Matrix::Constant(4, V, -std::log(double(V)));
    TokenIds targets{1, 3, 6, 0};
    std::vector<std::uint8_t> mask{1, 1, 1, 1};
    CHECK(std::abs(nll_loss(lp, targets, mask) - std::log(7.0)) <= 1e-12);
}

TEST_CASE("nll of a certain prediction is zero") {
    Matrix lp = Matrix::Constant(2, 3, -50.0);
    lp(1, 2) = 0.0;
    TokenIds targets{0, 2};
    std::vector<std::uint8_t> mask{0, 1};
    CHECK(nll_loss(lp, targets, mask) == 0.0);
}

TEST_CASE("nll with a mixed mask") {
    // Probabilities of the target at each of five positions.
    const double p[5] = {0.5, 0.25, 0.1, 0.8, 0.05};
    Matrix lp = Matrix::Constant(5, 4, std::log(1e-3));
    TokenIds targets{0, 1, 2, 3, 1};
    for (int i = 0; i < 5; ++i) {
        lp(i, targets[static_cast<std::size_t>(i)]) = std::log(p[i]);
    }
    std::vector<std::uint8_t> mask{0, 1, 0, 1, 1};
    const double hand = (-std::log(0.25) - std::log(0.8) - std::log(0.05)) / 3.0;
    CHECK(std::abs(nll_loss(lp, targets, mask) - hand) <= 1e-12);
    std::vector<std::uint8_t> none(5, 0);
    CHECK_THROWS_AS(nll_loss(lp, targets, none), ValidationError);
    std::vector<std::uint8_t> wrong(4, 1);
    CHECK_THROWS_AS(nll_loss(lp, targets, wrong), ValidationError);
}

TEST_CASE("aggressive stopping traces") {
    auto run = [](const StoppingPolicy& pol, std::vector<double> trace) {
        StoppingState s;
        std::vector<bool> out;
        for (double v : trace) {
            auto d = should_stop(pol, s, v);
            s = d.state;
            out.push_back(d.stop);
        }
        return out;
    };
    auto agg = StoppingPolicy::aggressive();
    CHECK(run(agg, {2.0, 1.85, 1.80, 1.78}) == std::vector<bool>{false, false, false, true});
    CHECK(run(agg, {2.0, 1.95, 1.80, 1.75, 1.60, 1.55, 1.40}) == std::vector<bool>(7, false));
    CHECK(run(StoppingPolicy::convergence(3), {1.0, 1.0, 1.0, 1.0}) ==
          std::vector<bool>{false, false, false, true});

    StoppingState s;
    s = should_stop(agg, s, 2.0).state;
    auto d = should_stop(agg, s, 1.95);
    CHECK(d.state.failures == 1);
    CHECK(d.improved);
    CHECK(should_stop(agg, d.state, 1.5).state.failures == 0);
}

TEST_CASE("previous-value reference") {
    auto final_stop = [](const StoppingPolicy& pol, std::vector<double> trace) {
        StoppingState s;
        bool stop = false;
        for (double v : trace) {
            auto d = should_stop(pol, s, v);
            s = d.state;
            stop = d.stop;
        }
        return stop;
    };
    // 1.0 -> 1.5 -> 1.35: two failures against the best value, but the last
    // step drops 0.15 below the previous one.
    StoppingPolicy prev = StoppingPolicy::aggressive();
    prev.reference = StoppingReference::previous;
    CHECK(final_stop(StoppingPolicy::aggressive(), {1.0, 1.5, 1.35}));
    CHECK_FALSE(final_stop(prev, {1.0, 1.5, 1.35}));
}

TEST_CASE("train config defaults and json") {
    CHECK(default_train_config(TrainStage::stage2b).stopping.kind == StoppingKind::aggressive);
    CHECK(default_train_config(TrainStage::stage1).stopping.kind == StoppingKind::convergence);
    auto c = default_train_config(TrainStage::stage3);
    c.learning_rate = 0.003;
    c.batch_size = 7;
    c.stopping = StoppingPolicy::aggressive(0.2, 3);
    c.stopping.reference = StoppingReference::previous;
    auto back = train_config_from_json(to_json(c));
    CHECK(back.stage == TrainStage::stage3);
    CHECK(back.learning_rate == 0.003);
    CHECK(back.batch_size == 7);
    CHECK(back.stopping.min_decrease == 0.2);
    CHECK(back.stopping.patience == 3);
    CHECK(back.stopping.reference == StoppingReference::previous);
    CHECK(parse_train_stage("stage2b") == TrainStage::stage2b);
    CHECK(parse_train_stage("1") == TrainStage::stage1);
    CHECK_THROWS_AS(parse_train_stage("4"), ValidationError);
    c.batch_size = 0;
    CHECK_THROWS_AS(validate(c), ValidationError);
}

TEST_CASE("stage data checks") {
    auto f = make_fixture();
    auto p = plain(f.train, f.vocab);
    auto b = one_shot(f.train, f.vocab, true);
    auto a = one_shot(f.train, f.vocab, false);
    CHECK_NOTHROW(check_stage_data(TrainStage::baseline, p));
    CHECK_THROWS_AS(check_stage_data(TrainStage::baseline, b), ValidationError);
    CHECK_THROWS_AS(check_stage_data(TrainStage::stage2b, a), ValidationError);
    CHECK_THROWS_AS(check_stage_data(TrainStage::stage2a, b), ValidationError);
    CHECK_NOTHROW(check_stage_data(TrainStage::stage3, b));
    CHECK_NOTHROW(check_stage_data(TrainStage::stage3, a));
}

TEST_CASE("adapter stages require adapters and full stages reject them") {
    auto f = make_fixture();
    auto data = plain(f.train, f.vocab);
    auto base = init_model(f.model, 1);
    auto cfg = default_train_config(TrainStage::stage1);
    cfg.max_steps = 1;
    CHECK_THROWS_AS(train_stage(base, data, {}, cfg), StateError);
    auto adapted = inject_adapters(base, AdapterConfig{4});
    auto full = default_train_config(TrainStage::baseline);
    full.max_steps = 1;
    CHECK_THROWS_AS(train_stage(adapted, data, {}, full), StateError);
}

TEST_CASE("stage 1 improves validation loss and keeps the base frozen") {
    auto f = make_fixture();
    auto tr = plain(f.train, f.vocab);
    auto va = plain(f.validation, f.vocab);
    REQUIRE(tr.size() >= 40);
    REQUIRE_FALSE(va.empty());
    auto model = inject_adapters(init_model(f.model, 3), AdapterConfig{8});
    auto cfg = default_train_config(TrainStage::stage1);
    cfg.learning_rate = 3e-3;
    cfg.batch_size = 8;
    cfg.validate_every_fraction = 0.5;
    cfg.max_steps = 24;
    auto res = train_stage(model, tr, va, cfg);
    REQUIRE(res.log.size() >= 4);
    const double start = evaluate_loss(model, va);
    CHECK(*res.log[0].val_loss < start);
    for (std::size_t i = 1; i < 4; ++i) {
        CHECK(*res.log[i].val_loss < *res.log[i - 1].val_loss);
    }
    CHECK(hash_arrays(res.params, false, true) == hash_arrays(model, false, true));
    CHECK(hash_arrays(res.params, true, false) != hash_arrays(model, true, false));
}

TEST_CASE("masked loss ignores context positions") {
    auto f = make_fixture();
    auto s = one_shot(f.train, f.vocab, true)[0];
    auto p = init_model(f.model, 4);
    const std::size_t bias = p.index_of("out.bias");
    auto g = zero_gradients(p);
    loss_and_gradients(p, s.encoder_ids, s.decoder_ids, s.loss_mask, g);

    // d(sum nll)/d(out.bias) = sum over masked rows of (softmax - onehot).
    Matrix lp = forward(p, s.encoder_ids, s.decoder_ids);
    auto targets = prediction_targets(s);
    Matrix expect = Matrix::Zero(1, lp.cols());
    Matrix all_rows = Matrix::Zero(1, lp.cols());
    for (std::size_t j = 0; j < targets.size(); ++j) {
        Matrix row = lp.row(static_cast<Eigen::Index>(j)).array().exp().matrix();
        row(0, targets[j]) -= 1.0;
        all_rows += row;
        if (s.loss_mask[j]) {
            expect += row;
        }
    }
    CHECK((g[bias] - expect).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK((g[bias] - all_rows).cwiseAbs().maxCoeff() > 1e-3);

    // Finite-difference probe on one bias entry of a context-only target.
    const TokenId ctx_tok = targets[0];
    REQUIRE(s.loss_mask[0] == 0);
    auto loss = [&](const ModelParams& m) {
        auto scratch = zero_gradients(m);
        return loss_and_gradients(m, s.encoder_ids, s.decoder_ids, s.loss_mask, scratch).nll_sum;
    };
    const double h = 1e-5;
    auto plus = p;
    plus.get("out.bias").value(0, ctx_tok) += h;
    auto minus = p;
    minus.get("out.bias").value(0, ctx_tok) -= h;
    const double num = (loss(plus) - loss(minus)) / (2 * h);
    CHECK(std::abs(num - g[bias](0, ctx_tok)) <= 1e-6);
}

TEST_CASE("stage 2a and 2b objectives differ") {
    auto f = make_fixture();
    auto model = init_model(f.model, 6);
    auto run = [&](TrainStage stage, bool masked) {
        auto cfg = default_train_config(stage);
        cfg.batch_size = 8;
        cfg.validate_every_fraction = 0.01;
        cfg.max_steps = 4;
        return train_stage(model, one_shot(f.train, f.vocab, masked), {}, cfg);
    };
    auto a = run(TrainStage::stage2a, false);
    auto b = run(TrainStage::stage2b, true);
    REQUIRE(a.log.size() == 4);
    REQUIRE(b.log.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(a.log[i].train_loss != b.log[i].train_loss);
    }
}

TEST_CASE("training is deterministic") {
    auto f = make_fixture();
    auto model = init_model(f.model, 6);
    auto cfg = default_train_config(TrainStage::baseline);
    cfg.batch_size = 4;
    cfg.max_steps = 10;
    cfg.validate_every_fraction = 0.25;
    auto tr = plain(f.train, f.vocab);
    auto va = plain(f.validation, f.vocab);
    auto a = train_stage(model, tr, va, cfg);
    auto b = train_stage(model, tr, va, cfg);
    CHECK(hash_arrays(a.params, false, false) == hash_arrays(b.params, false, false));
    CHECK(serialize_train_log(a.log) == serialize_train_log(b.log));
    cfg.seed = 99;
    auto c = train_stage(model, tr, va, cfg);
    CHECK(serialize_train_log(a.log) != serialize_train_log(c.log));
}
