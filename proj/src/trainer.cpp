#include "iclmt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "iclmt/util.hpp"

namespace iclmt {

std::string to_string(TrainStage stage) {
    switch (stage) {
        case TrainStage::baseline: return "baseline";
        case TrainStage::stage1: return "1";
        case TrainStage::stage2a: return "2a";
        case TrainStage::stage2b: return "2b";
        case TrainStage::stage3: return "3";
    }
    return "?";
}

TrainStage parse_train_stage(std::string_view name) {
    std::string_view n = name;
    if (n.substr(0, 5) == "stage") {
        n.remove_prefix(5);
    }
    if (n == "baseline" || n == "baseline_ft") return TrainStage::baseline;
    if (n == "1") return TrainStage::stage1;
    if (n == "2a") return TrainStage::stage2a;
    if (n == "2b") return TrainStage::stage2b;
    if (n == "3") return TrainStage::stage3;
    throw ValidationError("unknown training stage '" + std::string(name) + "'");
}

double nll_loss(const Matrix& log_probs, std::span<const TokenId> targets, std::span<const std::uint8_t> loss_mask) {
    if (targets.size() != loss_mask.size() || static_cast<std::size_t>(log_probs.rows()) != targets.size()) {
        throw ValidationError("log_probs, targets and loss_mask must have the same length");
    }
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t j = 0; j < targets.size(); ++j) {
        if (!loss_mask[j]) {
            continue;
        }
        if (targets[j] < 0 || targets[j] >= log_probs.cols()) {
            throw ValidationError("target id " + std::to_string(targets[j]) + " out of range");
        }
        sum -= log_probs(static_cast<Eigen::Index>(j), targets[j]);
        ++count;
    }
    if (count == 0) {
        throw ValidationError("loss mask selects no positions");
    }
    return sum / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Early stopping

StoppingPolicy StoppingPolicy::aggressive(double min_decrease, std::size_t patience) {
    return {StoppingKind::aggressive, min_decrease, patience, StoppingReference::best_so_far};
}

StoppingPolicy StoppingPolicy::convergence(std::size_t patience) {
    return {StoppingKind::convergence, 0.0, patience, StoppingReference::best_so_far};
}

void validate(const StoppingPolicy& policy) {
    if (!(policy.min_decrease >= 0.0)) {
        throw ValidationError("min_decrease must be non-negative");
    }
    if (policy.patience < 1) {
        throw ValidationError("patience must be at least 1");
    }
}

StopDecision should_stop(const StoppingPolicy& policy, const StoppingState& state, double new_val_loss) {
    StopDecision d{state, false, false};
    StoppingState& s = d.state;
    ++s.validations;
    if (!s.best) {
        s.best = new_val_loss;
        s.previous = new_val_loss;
        d.improved = true;
        return d;
    }
    bool failed = false;
    if (policy.kind == StoppingKind::aggressive) {
        const double ref = policy.reference == StoppingReference::best_so_far ? *s.best : *s.previous;
        failed = ref - new_val_loss < policy.min_decrease;
    } else {
        failed = !(new_val_loss < *s.best);
    }
    if (new_val_loss < *s.best) {
        s.best = new_val_loss;
        d.improved = true;
    }
    s.previous = new_val_loss;
    s.failures = failed ? s.failures + 1 : 0;
    d.stop = s.failures >= policy.patience;
    return d;
}

// ---------------------------------------------------------------------------
// Configuration

TrainConfig default_train_config(TrainStage stage) {
    TrainConfig c;
    c.stage = stage;
    if (stage == TrainStage::stage2a || stage == TrainStage::stage2b) {
        c.stopping = StoppingPolicy::aggressive();
    } else {
        c.stopping = StoppingPolicy::convergence(3);
    }
    return c;
}

void validate(const TrainConfig& c) {
    if (!(c.learning_rate > 0.0)) {
        throw ValidationError("learning_rate must be positive");
    }
    if (!(c.beta1 >= 0.0 && c.beta1 < 1.0 && c.beta2 >= 0.0 && c.beta2 < 1.0)) {
        throw ValidationError("adam betas must lie in [0, 1)");
    }
    if (!(c.epsilon > 0.0)) {
        throw ValidationError("adam epsilon must be positive");
    }
    if (c.batch_size == 0) {
        throw ValidationError("batch_size must be positive");
    }
    if (!(c.validate_every_fraction > 0.0 && c.validate_every_fraction <= 1.0)) {
        throw ValidationError("validate_every_fraction must lie in (0, 1]");
    }
    if (c.max_epochs == 0) {
        throw ValidationError("max_epochs must be positive");
    }
    if (c.clip_norm < 0.0) {
        throw ValidationError("clip_norm must be non-negative");
    }
    validate(c.stopping);
}

nlohmann::json to_json(const TrainConfig& c) {
    return {{"stage", to_string(c.stage)},
            {"learning_rate", c.learning_rate},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"epsilon", c.epsilon},
            {"batch_size", c.batch_size},
            {"seed", c.seed},
            {"validate_every_fraction", c.validate_every_fraction},
            {"max_epochs", c.max_epochs},
            {"max_steps", c.max_steps},
            {"clip_norm", c.clip_norm},
            {"stopping",
             {{"kind", c.stopping.kind == StoppingKind::aggressive ? "aggressive" : "convergence"},
              {"min_decrease", c.stopping.min_decrease},
              {"patience", c.stopping.patience},
              {"reference", c.stopping.reference == StoppingReference::best_so_far ? "best" : "previous"}}}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, std::optional<TrainStage> stage) {
    try {
        TrainStage st = stage ? *stage : parse_train_stage(j.value("stage", std::string("baseline")));
        TrainConfig c = default_train_config(st);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.epsilon = j.value("epsilon", c.epsilon);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.seed = j.value("seed", c.seed);
        c.validate_every_fraction = j.value("validate_every_fraction", c.validate_every_fraction);
        c.max_epochs = j.value("max_epochs", c.max_epochs);
        c.max_steps = j.value("max_steps", c.max_steps);
        c.clip_norm = j.value("clip_norm", c.clip_norm);
        if (j.contains("stopping")) {
            const auto& s = j.at("stopping");
            const std::string kind = s.value("kind", std::string(
                c.stopping.kind == StoppingKind::aggressive ? "aggressive" : "convergence"));
            if (kind == "aggressive") {
                c.stopping = StoppingPolicy::aggressive();
            } else if (kind == "convergence") {
                c.stopping = StoppingPolicy::convergence(c.stopping.patience);
            } else {
                throw ValidationError("unknown stopping kind '" + kind + "'");
            }
            c.stopping.min_decrease = s.value("min_decrease", c.stopping.min_decrease);
            c.stopping.patience = s.value("patience", c.stopping.patience);
            const std::string ref = s.value("reference", std::string("best"));
            if (ref == "best") {
                c.stopping.reference = StoppingReference::best_so_far;
            } else if (ref == "previous") {
                c.stopping.reference = StoppingReference::previous;
            } else {
                throw ValidationError("unknown stopping reference '" + ref + "'");
            }
        }
        validate(c);
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("train config: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Training

void check_stage_data(TrainStage stage, std::span<const EncodedSample> samples) {
    for (const auto& s : samples) {
        const std::string where = "sample for query " + std::to_string(s.query_id);
        if (s.loss_mask.size() + 1 != s.decoder_ids.size()) {
            throw ValidationError(where + " has a loss mask of the wrong length");
        }
        if (std::none_of(s.loss_mask.begin(), s.loss_mask.end(), [](std::uint8_t b) { return b != 0; })) {
            throw ValidationError(where + " has an all-zero loss mask");
        }
        switch (stage) {
            case TrainStage::baseline:
            case TrainStage::stage1:
                if (s.k() != 0) {
                    throw ValidationError(where + ": stage " + to_string(stage) +
                                          " trains on plain samples, got k = " + std::to_string(s.k()));
                }
                break;
            case TrainStage::stage2a:
                if (s.stage != SampleStage::stage2a) {
                    throw ValidationError(where + ": stage 2a needs unmasked stage-2 samples, got stage " +
                                          to_string(s.stage));
                }
                break;
            case TrainStage::stage2b: {
                if (s.stage != SampleStage::stage2b) {
                    throw ValidationError(where + ": stage 2b needs masked stage-2 samples, got stage " +
                                          to_string(s.stage));
                }
                break;
            }
            case TrainStage::stage3:
                if (s.stage == SampleStage::stage0) {
                    throw ValidationError(where + ": stage 3 needs stage-2 samples");
                }
                break;
        }
    }
}

double evaluate_loss(const ModelParams& params, std::span<const EncodedSample> samples) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& s : samples) {
        std::span<const TokenId> dec(s.decoder_ids);
        Matrix lp = forward(params, s.encoder_ids, dec.first(dec.size() - 1));
        for (std::size_t j = 0; j + 1 < s.decoder_ids.size(); ++j) {
            if (s.loss_mask[j]) {
                sum -= lp(static_cast<Eigen::Index>(j), s.decoder_ids[j + 1]);
                ++count;
            }
        }
    }
    if (count == 0) {
        throw ValidationError("no masked positions to evaluate");
    }
    return sum / static_cast<double>(count);
}

namespace {

void check_trainable_layout(TrainStage stage, const ModelParams& params) {
    const bool adapter_stage = stage == TrainStage::stage1 || stage == TrainStage::stage3;
    if (adapter_stage) {
        if (!params.has_adapters()) {
            throw StateError("stage " + to_string(stage) + " needs a model with injected adapters");
        }
        for (const auto& a : params.arrays()) {
            if (!a.adapter && a.trainable) {
                throw StateError("stage " + to_string(stage) + " needs a frozen base, but '" + a.name +
                                 "' is trainable");
            }
        }
    } else if (params.has_adapters()) {
        throw StateError("stage " + to_string(stage) + " trains the full model and does not accept adapters");
    }
}

/// Seeded shuffle, stable sort by total length, fixed-size chunks, shuffled chunk order.
std::vector<std::vector<std::size_t>> make_batches(std::span<const EncodedSample> data, std::size_t batch_size,
                                                   Rng& rng) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return data[a].encoder_ids.size() + data[a].decoder_ids.size() <
               data[b].encoder_ids.size() + data[b].decoder_ids.size();
    });
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
    }
    rng.shuffle(batches);
    return batches;
}

class Adam {
public:
    Adam(const ModelParams& params, const TrainConfig& c) : c_(c) {
        for (const auto& a : params.arrays()) {
            m_.push_back(a.trainable ? Matrix::Zero(a.value.rows(), a.value.cols()) : Matrix());
            v_.push_back(m_.back());
        }
    }

    void step(ModelParams& params, const Gradients& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(c_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(c_.beta2, static_cast<double>(t_));
        double scale = 1.0;
        if (c_.clip_norm > 0.0) {
            double sq = 0.0;
            for (std::size_t i = 0; i < grads.size(); ++i) {
                if (params.arrays()[i].trainable) {
                    sq += grads[i].squaredNorm();
                }
            }
            const double norm = std::sqrt(sq);
            if (norm > c_.clip_norm) {
                scale = c_.clip_norm / norm;
            }
        }
        for (std::size_t i = 0; i < grads.size(); ++i) {
            auto& a = params.arrays()[i];
            if (!a.trainable) {
                continue;
            }
            const Matrix g = grads[i] * scale;
            m_[i] = c_.beta1 * m_[i] + (1.0 - c_.beta1) * g;
            v_[i] = c_.beta2 * v_[i] + (1.0 - c_.beta2) * g.cwiseAbs2();
            a.value.array() -= c_.learning_rate * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + c_.epsilon);
        }
    }

private:
    const TrainConfig& c_;
    std::vector<Matrix> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace

TrainResult train_stage(const ModelParams& model_in, std::span<const EncodedSample> train,
                        std::span<const EncodedSample> validation, const TrainConfig& config) {
    validate(config);
    if (train.empty()) {
        throw ValidationError("training data is empty");
    }
    check_stage_data(config.stage, train);
    check_stage_data(config.stage, validation);

    ModelParams params = model_in;
    if (config.stage == TrainStage::baseline || config.stage == TrainStage::stage2a ||
        config.stage == TrainStage::stage2b) {
        for (auto& a : params.arrays()) {
            a.trainable = true;
        }
    }
    check_trainable_layout(config.stage, params);

    Rng rng(config.seed);
    Adam adam(params, config);
    Gradients grads = zero_gradients(params);

    const std::size_t steps_per_epoch = (train.size() + config.batch_size - 1) / config.batch_size;
    const auto interval = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(config.validate_every_fraction * static_cast<double>(steps_per_epoch))));

    TrainResult result;
    StoppingState stop_state;
    bool stopped = false;
    double window_loss = 0.0;
    std::size_t window_count = 0;

    for (std::size_t epoch = 0; epoch < config.max_epochs && !stopped; ++epoch) {
        for (const auto& batch : make_batches(train, config.batch_size, rng)) {
            std::size_t masked = 0;
            for (std::size_t i : batch) {
                masked += static_cast<std::size_t>(
                    std::count_if(train[i].loss_mask.begin(), train[i].loss_mask.end(), [](auto b) { return b != 0; }));
            }
            for (auto& g : grads) {
                g.setZero();
            }
            double batch_nll = 0.0;
            for (std::size_t i : batch) {
                batch_nll += loss_and_gradients(params, train[i].encoder_ids, train[i].decoder_ids,
                                                train[i].loss_mask, grads, 1.0 / static_cast<double>(masked))
                                 .nll_sum;
            }
            adam.step(params, grads);
            ++result.steps;
            window_loss += batch_nll;
            window_count += masked;

            const bool capped = config.max_steps != 0 && result.steps >= config.max_steps;
            if (result.steps % interval == 0 || capped) {
                TrainLogEntry e;
                e.step = result.steps;
                e.epoch_fraction = static_cast<double>(result.steps) / static_cast<double>(steps_per_epoch);
                e.train_loss = window_loss / static_cast<double>(window_count);
                window_loss = 0.0;
                window_count = 0;
                if (!validation.empty()) {
                    const double v = evaluate_loss(params, validation);
                    e.val_loss = v;
                    StopDecision d = should_stop(config.stopping, stop_state, v);
                    stop_state = d.state;
                    e.stop = d.stop;
                    if (!result.best_val_loss || v < *result.best_val_loss) {
                        result.best_val_loss = v;
                        result.best_step = result.steps;
                        result.params = params;
                    }
                    stopped = d.stop;
                }
                result.log.push_back(e);
            }
            if (stopped || capped) {
                stopped = true;
                break;
            }
        }
    }
    if (!result.best_val_loss) {
        result.params = std::move(params);
        result.best_step = result.steps;
    }
    return result;
}

std::string serialize_train_log(std::span<const TrainLogEntry> log) {
    std::ostringstream os;
    for (const auto& e : log) {
        nlohmann::json j = {{"step", e.step},
                            {"epoch_fraction", e.epoch_fraction},
                            {"train_loss", e.train_loss},
                            {"val_loss", e.val_loss ? nlohmann::json(*e.val_loss) : nlohmann::json(nullptr)},
                            {"stop", e.stop}};
        os << j.dump() << '\n';
    }
    return os.str();
}

}  // namespace iclmt
