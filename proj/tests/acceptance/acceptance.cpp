// Acceptance criteria 1-11. One line per criterion; tolerances are pinned
// below. Exits 0 once every requested criterion has been evaluated (failures
// are reported, not fatal) unless --strict is given.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

#include "../support/gradcheck.hpp"
#include "../support/oracles.hpp"
#include "../support/stats.hpp"
#include "stella/numcore/ops.hpp"
#include "stella/trainer/trainer.hpp"

using namespace stella;
using stella::testing::grad_check;
using stella::testing::random_tensor;
using nc::Tensor;

namespace {

constexpr double kGradTol = 1e-5;
constexpr double kOracleTol = 1e-12;
constexpr double kEquivTol = 1e-12;
constexpr double kRotationTol = 1e-9;
constexpr double kChiP = 0.01;
constexpr double kAvmAccuracy = 90.0;  // percent
constexpr std::size_t kAvmMaxSteps = 2000;
constexpr double kRecallFactor = 1.5;
constexpr double kEntryFactor = 1.9;
constexpr double kGradSeconds = 60.0;
constexpr double kAvmSeconds = 300.0;
constexpr double kEndToEndSeconds = 1800.0;

// End-to-end runs use lr 1e-3: at 1e-4 retrieval stays at chance within the
// desk budget and the directional comparisons would compare noise.
constexpr double kEndToEndLr = 1e-3;
constexpr std::size_t kSeeds = 3;
// Single-task pre-training before measuring selection recall: 10 epochs give
// the matching module ~300 updates (it needs several hundred to localize).
constexpr std::size_t kPretrainEpochs = 10;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, x);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

data::Geometry tiny_geometry() {
    data::Geometry g;
    g.audio = {8, 8, 4};
    g.video = {2, 8, 8, 4, 1};
    return g;
}

data::PatchSet random_set(data::Modality m, const data::Geometry& g, std::size_t batch, Rng& rng) {
    data::PatchSet s;
    s.modality = m;
    s.grid = m == data::Modality::audio ? data::audio_grid(g.audio) : data::video_grid(g.video);
    const std::size_t n = s.grid.size();
    const std::size_t pd = m == data::Modality::audio ? g.audio.patch_dim() : g.video.patch_dim();
    s.patches = random_tensor({batch, n, pd}, rng, 1.0, false);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < n; ++i) s.indices.push_back(i);
    return s;
}

std::vector<double> random_simplex_rows(std::size_t b, std::size_t n, Rng& rng) {
    std::vector<double> v(b * n);
    for (std::size_t r = 0; r < b; ++r) {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i) s += v[r * n + i] = 0.05 + rng.uniform();
        for (std::size_t i = 0; i < n; ++i) v[r * n + i] /= s;
    }
    return v;
}

// ---------------------------------------------------------------- 1

Outcome gradient_integrity() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    std::string worst_name;
    std::size_t coords = 0;
    const char* name = "";
    auto track = [&](const testing::GradCheckResult& r) {
        if (r.max_rel_err > worst) {
            worst = r.max_rel_err;
            worst_name = name;
        }
        coords += r.checked;
    };
    const auto g = tiny_geometry();
    backbone::BackboneConfig bc;
    bc.embed_dim = 8;
    bc.heads = 2;
    bc.encoder_layers = 1;

    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(derive_seed({seed, 101}));
        auto a = random_tensor({2, 3, 4}, rng);
        auto b = random_tensor({3, 4}, rng);
        auto pos = nc::add_scalar(nc::square(random_tensor({2, 3}, rng, 1.0, false)), 0.2);
        pos = Tensor::from({2, 3}, std::vector<double>(pos.data().begin(), pos.data().end()), true);
        auto w = random_tensor({4, 5}, rng, 0.5);
        auto bias = random_tensor({5}, rng, 0.1);
        auto gamma = random_tensor({5}, rng, 0.3);
        auto beta = random_tensor({5}, rng, 0.3);
        name = "add/mul/sub";
        track(grad_check([&] { return nc::sum_all(nc::mul(nc::add(a, b), nc::sub(a, b))); }, {a, b}));
        name = "div/square";
        track(grad_check([&] { return nc::sum_all(nc::div(a, nc::add_scalar(nc::square(b), 1.0))); }, {a, b}));
        name = "log/exp/scale";
        track(grad_check([&] { return nc::sum_all(nc::mul(nc::log(pos), nc::exp(nc::scale(pos, 0.3)))); }, {pos}));
        name = "sigmoid/gelu";
        track(grad_check([&] { return nc::sum_all(nc::mul(nc::sigmoid(a), nc::gelu(a))); }, {a}));
        name = "log_softmax/softmax";
        track(grad_check([&] { return nc::sum_all(nc::mul(nc::log_softmax(a, 1), nc::softmax(a, 2))); }, {a}));
        name = "l2_normalize";
        track(grad_check([&] { return nc::sum_all(nc::mul(nc::l2_normalize(a, -1), b)); }, {a, b}));
        name = "linear/layer_norm/matmul";
        track(grad_check(
            [&] {
                auto h = nc::layer_norm(nc::linear(a, w, bias), gamma, beta, 1e-6);
                return nc::sum_all(nc::square(nc::matmul(h, nc::transpose(w, 0, 1))));
            },
            {a, w, bias, gamma, beta}));
        name = "concat/permute/gather/index_select";
        track(grad_check(
            [&] {
                auto c = nc::concat({a, nc::permute(a, {0, 1, 2})}, 1);
                auto gr = nc::gather_rows(c, {0, 5, 2, 1, 1, 4}, 3);
                return nc::sum_all(nc::square(nc::index_select(gr, 2, {3, 0, 0})));
            },
            {a}));
        auto pw = Tensor::from({3}, {0.2 + rng.uniform(), 1.0, 3.0}, true);
        name = "weighted_mean_pool";
        track(grad_check([&] { return nc::sum_all(nc::square(nc::weighted_mean_pool(a, 1, pw))); }, {a, pw}));
        name = "transpose/mean";
        track(grad_check([&] { return nc::sum_all(nc::square(nc::mean(nc::transpose(a, 0, 2), 1))); }, {a}));

        // composite losses: five-point stencil (see grad_check)
        backbone::Backbone bb(bc, g, derive_seed({seed, 102}));
        auto as = random_set(data::Modality::audio, g, 2, rng);
        auto vs = random_set(data::Modality::video, g, 2, rng);
        auto ma = backbone::random_masks(2, 4, 0.5, rng);
        auto mv = backbone::random_masks(2, 8, 0.5, rng);
        auto params = bb.params().tensors();
        name = "reconstruction loss";
        track(grad_check([&] { return bb.forward(as, vs, ma, mv).l_r; }, params, 1e-4, 1, &rng, 1e-5, true));
        name = "contrastive loss";
        track(grad_check(
            [&] {
                auto r = bb.forward(as, vs, ma, mv);
                return backbone::contrastive_loss(r.c_a, r.c_v, bc.tau);
            },
            params, 1e-4, 1, &rng, 1e-5, true));

        auto ca = random_tensor({4, 6}, rng);
        auto cv = random_tensor({4, 6}, rng);
        auto sa = random_tensor({4, 6}, rng, 1.0, false);
        auto sv = random_tensor({4, 6}, rng, 1.0, false);
        name = "penalty";
        track(grad_check([&] { return memory::der_penalty(ca, cv, sa, sv); }, {ca, cv}));

        avm::AvmModule avm(4, 2, derive_seed({seed, 103}));
        auto o_a = random_tensor({4, 3, 4}, rng, 1.0, false);
        auto o_v = random_tensor({4, 5, 4}, rng, 1.0, false);
        auto labels = Tensor::from({4}, {1, 0, 1, 0});
        name = "matching loss";
        track(grad_check([&] { return nc::binary_cross_entropy(avm.matching_forward(o_a, o_v), labels); },
                         avm.params().tensors(), 1e-5, 4, &rng));
    }
    const double secs = seconds_since(t0);
    bool ok = worst <= kGradTol && secs < kGradSeconds;
    return {ok, "100 seeds, " + std::to_string(coords) + " coordinates, max rel err " + fmt("%.2e", worst) + " (" + worst_name + ")" +
                    ", " + fmt("%.1f", secs) + " s"};
}

// ---------------------------------------------------------------- 2

double proj(const Tensor& x, const Tensor& w, std::size_t b, std::size_t i, std::size_t h, std::size_t k,
            std::size_t d) {
    double s = 0;
    for (std::size_t c = 0; c < x.dim(2); ++c) s += x.at({b, i, c}) * w.at({c, h * d + k});
    return s;
}

Outcome formula_oracles() {
    Rng rng(202);
    std::map<std::string, double> worst;
    std::map<std::string, std::size_t> mismatches;
    const int instances = 100;
    for (int trial = 0; trial < instances; ++trial) {
        const std::size_t h = 1 + rng.index(2), d = 1 + rng.index(3), dim = h * d;
        const std::size_t b = 1 + rng.index(4), n = 1 + rng.index(16), m = n;
        const double beta = 0.1 + rng.uniform();

        // cross attention
        avm::AvmModule avm(dim, h, rng.next_u64());
        auto o_a = random_tensor({b, m, dim}, rng, 1.0, false);
        auto o_v = random_tensor({b, n, dim}, rng, 1.0, false);
        auto ca = avm.cross_attention(o_a, o_v, beta);
        double e1 = 0;
        for (std::size_t r = 0; r < b; ++r)
            for (std::size_t hh = 0; hh < h; ++hh)
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) {
                        double s = 0, t = 0;
                        for (std::size_t k = 0; k < d; ++k) {
                            s += proj(o_v, avm.wq_v, r, i, hh, k, d) * proj(o_a, avm.wk_a, r, j, hh, k, d);
                            t += proj(o_a, avm.wq_a, r, j, hh, k, d) * proj(o_v, avm.wk_v, r, i, hh, k, d);
                        }
                        s /= beta * std::sqrt(double(d));
                        t /= beta * std::sqrt(double(d));
                        e1 = std::max({e1, std::abs(ca.maps.a_a.at({r, hh, i, j}) - s),
                                       std::abs(ca.maps.a_v.at({r, hh, j, i}) - t)});
                    }
        worst["cross-attention"] = std::max(worst["cross-attention"], e1);

        // importance
        auto imp = selection::importance_scores(ca.maps);
        auto ia = oracle::importance(ca.maps.a_a);
        auto iv = oracle::importance(ca.maps.a_v);
        double e2 = 0;
        for (std::size_t i = 0; i < ia.size(); ++i) e2 = std::max(e2, std::abs(imp.i_a.data()[i] - ia[i]));
        for (std::size_t i = 0; i < iv.size(); ++i) e2 = std::max(e2, std::abs(imp.i_v.data()[i] - iv[i]));
        worst["importance"] = std::max(worst["importance"], e2);

        // localized gathering
        const std::size_t kap = 1 + rng.index(n);
        auto lv = selection::gather_localized(ca.proj.q_v, ca.proj.k_v, imp.i_v, kap);
        auto ov = oracle::localized(ca.proj.q_v, ca.proj.k_v, iv, kap);
        double e3 = 0;
        if (lv.top != ov.top) ++mismatches["localized"];
        for (std::size_t i = 0; i < ov.q_hat.size(); ++i) e3 = std::max(e3, std::abs(lv.q_hat.data()[i] - ov.q_hat[i]));
        for (std::size_t i = 0; i < ov.k_hat.size(); ++i) e3 = std::max(e3, std::abs(lv.k_hat.data()[i] - ov.k_hat[i]));
        worst["localized"] = std::max(worst["localized"], e3);

        // correlation
        auto q_past = random_tensor({b, h, d}, rng, 1.0, false);
        auto c = selection::correlation_scores(lv.k_hat, lv.q_hat, q_past, beta);
        auto oc = oracle::correlation(lv.k_hat, lv.q_hat, q_past, beta);
        double e4 = 0;
        for (std::size_t i = 0; i < oc.size(); ++i) e4 = std::max(e4, std::abs(c.data()[i] - oc[i]));
        worst["correlation"] = std::max(worst["correlation"], e4);

        // video selection and final gather
        auto corr = selection::expand_scores(c, lv.top, n);
        std::span<const double> iv_span = imp.i_v.data();
        const std::size_t kv = 1 + rng.index(n);
        const std::uint64_t s = rng.next_u64();
        Rng r1(s), r2(s);
        auto sel = selection::select_video(iv_span, corr, b, n, kv, r1);
        for (std::size_t r = 0; r < b; ++r) {
            std::vector<bool> flags;
            auto want = oracle::video_row(iv.data() + r * n, corr.data() + r * n, n, kv, r2, flags);
            auto got = sel.row(r);
            if (std::vector<std::size_t>(got.begin(), got.end()) != want) ++mismatches["video selection"];
        }
        data::PatchSet vs;
        vs.modality = data::Modality::video;
        vs.grid = {1, 1, n};
        vs.patches = random_tensor({b, n, 3}, rng, 1.0, false);
        for (std::size_t r = 0; r < b; ++r)
            for (std::size_t i = 0; i < n; ++i) vs.indices.push_back(i);
        auto gathered = selection::gather_selected(vs, sel.indices, kv);
        for (std::size_t r = 0; r < b; ++r)
            for (std::size_t j = 0; j < kv; ++j) {
                const std::size_t src = sel.indices[r * kv + j];
                if (gathered.indices[r * kv + j] != src) ++mismatches["gather"];
                for (std::size_t p = 0; p < 3; ++p)
                    if (gathered.patches.at({r, j, p}) != vs.patches.at({r, src, p})) ++mismatches["gather"];
            }

        // audio time-chunk selection on a random grid of the same size budget
        const std::size_t nt = 1 + rng.index(8), nf = 1 + rng.index(2), lc = 1 + rng.index(nt);
        const std::size_t na = nt * nf, ka = 1 + rng.index(na);
        auto ai = random_simplex_rows(b, na, rng);
        std::vector<double> ac(b * na);
        for (auto& x : ac) x = rng.uniform() < 0.5 ? 0.0 : rng.uniform();
        const std::uint64_t s2 = rng.next_u64();
        Rng r3(s2), r4(s2);
        auto sa = selection::select_audio(ai, ac, b, data::GridGeometry{1, nt, nf}, lc, ka, r3);
        for (std::size_t r = 0; r < b; ++r) {
            std::vector<bool> flags;
            auto want = oracle::audio_row(ai.data() + r * na, ac.data() + r * na, nt, nf, lc, ka, r4, flags);
            auto got = sa.row(r);
            if (std::vector<std::size_t>(got.begin(), got.end()) != want) ++mismatches["audio chunks"];
        }
    }
    bool ok = true;
    std::string detail = std::to_string(instances) + " instances;";
    for (const auto& [k, v] : worst) {
        ok = ok && v <= kOracleTol;
        detail += " " + k + " " + fmt("%.1e", v) + ";";
    }
    std::size_t bad = 0;
    for (const auto& [k, v] : mismatches) bad += v;
    ok = ok && bad == 0;
    detail += " index mismatches " + std::to_string(bad);
    return {ok, detail};
}

// ---------------------------------------------------------------- 3

// Whole chunks minus flagged patches, with at most one chunk cut to a prefix;
// or every unflagged patch plus fallback patches when flags leave too few.
bool audio_structure_ok(std::span<const std::size_t> sel, const std::vector<std::uint8_t>& flags, std::size_t off,
                        std::size_t num_time, std::size_t num_freq, std::size_t lc) {
    const std::size_t n = num_time * num_freq;
    std::vector<bool> in(n, false);
    for (auto i : sel) in[i] = true;
    std::size_t unflagged = 0;
    for (std::size_t i = 0; i < n; ++i) unflagged += !flags[off + i];
    if (unflagged < sel.size()) {
        for (std::size_t i = 0; i < n; ++i)
            if (!flags[off + i] && !in[i]) return false;
        return true;
    }
    std::size_t partial = 0;
    for (std::size_t t0 = 0; t0 < num_time; t0 += lc) {
        std::size_t lo = t0 * num_freq, hi = std::min(num_time, t0 + lc) * num_freq;
        std::size_t taken = 0, avail = 0;
        bool prefix = true, gap = false;
        for (std::size_t i = lo; i < hi; ++i) {
            if (in[i] && flags[off + i]) return false;
            if (flags[off + i]) continue;
            ++avail;
            if (in[i]) {
                ++taken;
                if (gap) prefix = false;
            } else {
                gap = true;
            }
        }
        if (taken != 0 && taken != avail) {
            if (!prefix) return false;
            ++partial;
        }
    }
    return partial <= 1;
}

Outcome selection_exactness() {
    Rng gen(303);
    std::size_t count_bad = 0, structure_bad = 0, index_bad = 0;
    const int configs = 1000;
    for (int trial = 0; trial < configs; ++trial) {
        const std::size_t nt = 1 + gen.index(16), nf = 1 + gen.index(6), lc = 1 + gen.index(nt);
        const std::size_t n = nt * nf, b = 1 + gen.index(3);
        const double rho = 0.05 + 0.95 * gen.uniform();
        const std::size_t k = selection::kappa(n, rho);
        auto imp = random_simplex_rows(b, n, gen);
        std::vector<double> corr(b * n);
        // a mix of unscored (0), certain (1) and partial exclusion scores
        for (auto& c : corr) {
            double u = gen.uniform();
            c = u < 0.5 ? 0.0 : u < 0.65 ? 1.0 : gen.uniform();
        }
        auto sa = selection::select_audio(imp, corr, b, data::GridGeometry{1, nt, nf}, lc, k, gen);
        auto sv = selection::select_video(imp, corr, b, n, k, gen);
        for (const auto* s : {&sa, &sv}) {
            if (s->indices.size() != b * k || s->kappa != k) ++count_bad;
            for (std::size_t r = 0; r < b; ++r) {
                auto row = s->row(r);
                std::set<std::size_t> u(row.begin(), row.end());
                if (u.size() != k || *u.rbegin() >= n) ++index_bad;
            }
        }
        for (std::size_t r = 0; r < b; ++r)
            if (!audio_structure_ok(sa.row(r), sa.flags, r * n, nt, nf, lc)) ++structure_bad;
    }
    const bool ok = count_bad == 0 && structure_bad == 0 && index_bad == 0;
    return {ok, std::to_string(configs) + " configurations; count errors " + std::to_string(count_bad) +
                    ", chunk-structure errors " + std::to_string(structure_bad) + ", index errors " +
                    std::to_string(index_bad)};
}

// ---------------------------------------------------------------- 4

Outcome sampling_statistics() {
    // (a) single-draw frequencies against the flag-zeroed importance
    const std::size_t n = 12, draws = 100000;
    Rng rng(404);
    auto imp = random_simplex_rows(1, n, rng);
    std::vector<double> corr(n, 0.0);
    corr[3] = corr[8] = 1.0;
    std::vector<double> obs(n, 0.0);
    for (std::size_t t = 0; t < draws; ++t) obs[selection::select_video(imp, corr, 1, n, 1, rng).indices[0]] += 1;
    std::vector<double> o, e;
    const double mass = 1.0 - imp[3] - imp[8];
    for (std::size_t i = 0; i < n; ++i) {
        if (i == 3 || i == 8) continue;
        o.push_back(obs[i]);
        e.push_back(draws * imp[i] / mass);
    }
    const double p_sel = testing::chi_square_p(o, e);
    const bool excluded_never = obs[3] == 0 && obs[8] == 0;

    // (b) reservoir inclusion
    const std::size_t cap = 100, stream = 10000, trials = 500;
    std::vector<double> kept(stream, 0.0);
    Rng rr(405);
    for (std::size_t t = 0; t < trials; ++t) {
        memory::ReservoirMemory mem(cap);
        for (std::size_t i = 0; i < stream; ++i) {
            memory::RehearsalEntry entry;
            entry.step = i;
            mem.insert(std::move(entry), rr);
        }
        for (std::size_t j = 0; j < mem.size(); ++j) kept[mem.at(j).step] += 1;
    }
    const double p_res = testing::chi_square_p(kept, std::vector<double>(stream, double(trials * cap) / stream));

    // (c) exclusion rate
    const std::vector<double> c{0.0, 0.05, 0.2, 0.35, 0.5, 0.65, 0.8, 0.95};
    const std::size_t reps = 20000;
    std::vector<double> flagged(c.size(), 0.0), uni(c.size(), 1.0 / c.size());
    for (std::size_t t = 0; t < reps; ++t) {
        auto s = selection::select_video(uni, c, 1, c.size(), 2, rng);
        for (std::size_t i = 0; i < c.size(); ++i) flagged[i] += s.flags[i];
    }
    bool within = true;
    for (std::size_t i = 0; i < c.size(); ++i) within = within && testing::within_three_sigma(flagged[i], reps, c[i]);

    const bool ok = p_sel > kChiP && excluded_never && p_res > kChiP && within;
    return {ok, "selection chi2 p " + fmt("%.3f", p_sel) + ", reservoir chi2 p " + fmt("%.3f", p_res) +
                    ", exclusion within 3 sigma: " + (within ? "yes" : "no")};
}

// ---------------------------------------------------------------- 5

struct SmallSetup {
    data::DataConfig dc;
    backbone::BackboneConfig model;
    std::vector<data::TaskDataset> tasks;

    SmallSetup() {
        dc.num_tasks = 2;
        dc.train_per_task = 24;
        dc.eval_per_task = 12;
        model.embed_dim = 16;
        tasks = data::build_sequence(data::default_task_specs(dc), dc);
    }

    std::vector<data::Batch> stream(std::size_t steps, std::size_t batch) const {
        std::vector<data::Batch> out;
        for (std::size_t k = 0; k < steps; ++k) {
            const auto& bank = tasks[(k * tasks.size()) / steps].train;
            std::vector<std::size_t> rows;
            for (std::size_t i = 0; i < batch; ++i) rows.push_back((k * batch + i) % bank.size());
            out.push_back(data::make_batch(bank, rows, dc.geometry));
        }
        return out;
    }
};

trainer::TrainConfig small_config(trainer::Strategy s) {
    trainer::TrainConfig c;
    c.strategy = s;
    c.batch = 4;
    c.memory = 16;
    c.optim.lr = 1e-3;
    c.seed = 5;
    return c;
}

std::vector<trainer::StepRecord> trajectory(const SmallSetup& f, const trainer::TrainConfig& cfg,
                                            const std::vector<data::Batch>& batches) {
    trainer::RunState s(cfg, f.model, f.dc.geometry, f.tasks.size());
    std::vector<trainer::StepRecord> out;
    for (const auto& b : batches) out.push_back(trainer::train_step(s, cfg, b));
    return out;
}

double max_gap(const std::vector<trainer::StepRecord>& x, const std::vector<trainer::StepRecord>& y) {
    double g = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        g = std::max({g, std::abs(x[i].l_r - y[i].l_r), std::abs(x[i].l_c - y[i].l_c),
                      std::abs(x[i].total - y[i].total)});
    }
    return g;
}

Outcome degeneracy_equivalences() {
    using trainer::Strategy;
    SmallSetup f;
    auto batches = f.stream(50, 4);

    auto full = small_config(Strategy::stella);
    full.select.rho_a = full.select.rho_v = 1.0;
    const double g1 = max_gap(trajectory(f, full, batches), trajectory(f, small_config(Strategy::derpp), batches));

    auto no_alpha = small_config(Strategy::derpp);
    no_alpha.alpha = 0.0;
    auto d0 = trajectory(f, no_alpha, batches);
    auto er = trajectory(f, small_config(Strategy::er), batches);
    double g2 = 0.0;
    for (std::size_t i = 0; i < d0.size(); ++i) {
        g2 = std::max({g2, std::abs(d0[i].l_r - er[i].l_r), std::abs(d0[i].l_c - er[i].l_c),
                       std::abs(d0[i].total - er[i].total)});
    }

    auto empty = small_config(Strategy::er);
    empty.memory = 0;
    const double g3 = max_gap(trajectory(f, empty, batches), trajectory(f, small_config(Strategy::finetune), batches));

    const bool ok = g1 <= kEquivTol && g2 <= kEquivTol && g3 <= kEquivTol;
    return {ok, "50 steps; stella(rho=1) vs derpp " + fmt("%.1e", g1) + ", derpp(alpha=0) vs er " + fmt("%.1e", g2) +
                    ", er(empty) vs finetune " + fmt("%.1e", g3)};
}

// ---------------------------------------------------------------- 6

// Rank by sorting all candidates, stable on index.
std::array<double, 3> recall_oracle(const Tensor& a, const Tensor& v, bool a2v) {
    const std::size_t n = a.dim(0), d = a.dim(1);
    auto cosine = [&](std::size_t i, std::size_t j) {
        double dot = 0, na = 0, nv = 0;
        for (std::size_t c = 0; c < d; ++c) {
            dot += a.at({i, c}) * v.at({j, c});
            na += a.at({i, c}) * a.at({i, c});
            nv += v.at({j, c}) * v.at({j, c});
        }
        return dot / std::sqrt(na) / std::sqrt(nv);
    };
    std::array<double, 3> hits{};
    for (std::size_t q = 0; q < n; ++q) {
        std::vector<std::pair<double, std::size_t>> cand;
        for (std::size_t c = 0; c < n; ++c) cand.push_back({a2v ? cosine(q, c) : cosine(c, q), c});
        std::stable_sort(cand.begin(), cand.end(), [](auto x, auto y) { return x.first > y.first; });
        std::size_t rank = 0;
        while (cand[rank].second != q) ++rank;
        for (std::size_t k = 0; k < 3; ++k) hits[k] += rank < eval::kRecallKs[k];
    }
    for (auto& h : hits) h = 100.0 * h / double(n);
    return hits;
}

Outcome metric_fidelity() {
    auto m = eval::AccMatrix::from_rows({{50}, {40, 60}, {30, 50, 70}});
    const double a = eval::average_accuracy(m), f = eval::average_forgetting(m);
    // hand values: A = (30+50+70)/3, F = ((50-30) + (60-50)) / 2
    bool ok = a == 50.0 && f == 15.0;
    auto two = eval::AccMatrix::from_rows({{80}, {20, 90}});
    ok = ok && eval::average_accuracy(two) == 55.0 && eval::average_forgetting(two) == 60.0;
    auto single = eval::AccMatrix::from_rows({{42}});
    ok = ok && eval::average_accuracy(single) == 42.0;

    Rng rng(606);
    std::size_t mismatched = 0;
    const int trials = 100;
    for (int t = 0; t < trials; ++t) {
        const std::size_t n = 10 + rng.index(41), d = 2 + rng.index(8);
        auto au = random_tensor({n, d}, rng, 1.0, false);
        auto vi = random_tensor({n, d}, rng, 1.0, false);
        auto rep = eval::zero_shot_retrieval(au, vi);
        auto oa = recall_oracle(au, vi, true);
        auto ov = recall_oracle(au, vi, false);
        for (std::size_t k = 0; k < 3; ++k) mismatched += (rep.a2v[k] != oa[k]) + (rep.v2a[k] != ov[k]);
    }
    ok = ok && mismatched == 0;
    return {ok, "A = " + fmt("%g", a) + ", F = " + fmt("%g", f) + " on the worked example; R@K mismatches over " +
                    std::to_string(trials) + " random n <= 50 instances: " + std::to_string(mismatched)};
}

// ---------------------------------------------------------------- 7

Outcome avm_learnability() {
    const auto t0 = std::chrono::steady_clock::now();
    data::DataConfig dc;
    dc.num_tasks = 1;
    auto task = data::build_sequence(data::default_task_specs(dc), dc)[0];
    backbone::BackboneConfig bc;
    backbone::Backbone bb(bc, dc.geometry, derive_seed({1, 1}));
    avm::AvmModule avm(bc.embed_dim, bc.heads, derive_seed({1, 2}));
    nc::Adam opt(avm.params().tensors(), {1e-3});
    Rng shuffle(701), pairs(702);

    const std::size_t batch = 8, check_every = 100;
    std::vector<std::size_t> order;
    std::size_t cursor = task.train.size();
    bool stop_grad_ok = true;
    double acc = 0.0;
    std::size_t step = 0;
    while (step < kAvmMaxSteps) {
        if (cursor + batch > order.size()) {
            order = shuffle.permutation(task.train.size());
            cursor = 0;
        }
        std::vector<std::size_t> rows(order.begin() + long(cursor), order.begin() + long(cursor + batch));
        cursor += batch;
        auto b = data::make_batch(task.train, rows, dc.geometry);
        bb.params().zero_grad();
        try {
            avm::avm_train_step(bb, b.audio, b.video, avm, opt, pairs);
        } catch (const std::logic_error&) {
            stop_grad_ok = false;
        }
        for (const auto& e : bb.params().entries())
            for (double x : e.tensor.grad()) stop_grad_ok = stop_grad_ok && x == 0.0;
        ++step;
        if (step % check_every == 0) {
            Rng er(703);
            acc = avm::matching_accuracy(bb, avm, task.eval, dc.geometry, er);
            if (acc >= kAvmAccuracy) break;
        }
    }
    const double secs = seconds_since(t0);
    const bool ok = acc >= kAvmAccuracy && stop_grad_ok && secs < kAvmSeconds;
    return {ok, "held-out accuracy " + fmt("%.1f", acc) + "% after " + std::to_string(step) +
                    " steps; backbone grads zero every step: " + (stop_grad_ok ? "yes" : "no") + ", " +
                    fmt("%.1f", secs) + " s"};
}

// ---------------------------------------------------------------- 8

Outcome selection_quality() {
    double recall_a = 0.0, recall_v = 0.0;
    std::size_t kap_a = 0, kap_v = 0, n_a = 0, n_v = 0;
    for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
        data::DataConfig dc;
        dc.num_tasks = 1;
        dc.seed = 7 + seed;
        auto tasks = data::build_sequence(data::default_task_specs(dc), dc);
        backbone::BackboneConfig bc;
        trainer::TrainConfig tc;
        tc.strategy = trainer::Strategy::stella;
        tc.optim.lr = kEndToEndLr;
        tc.epochs = kPretrainEpochs;
        tc.seed = seed;
        trainer::RunState s(tc, bc, dc.geometry, 1);
        const auto& bank = tasks[0].train;
        for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
            auto order = s.rng.shuffle.permutation(bank.size());
            for (std::size_t i = 0; i + tc.batch <= order.size(); i += tc.batch) {
                std::vector<std::size_t> rows(order.begin() + long(i), order.begin() + long(i + tc.batch));
                trainer::train_step(s, tc, data::make_batch(bank, rows, dc.geometry));
            }
        }

        // importance-driven selection on held-out pairs, no exclusion history
        const auto& ev = tasks[0].eval;
        n_a = dc.geometry.audio.num_patches();
        n_v = dc.geometry.video.num_patches();
        kap_a = selection::kappa(n_a, tc.select.rho_a);
        kap_v = selection::kappa(n_v, tc.select.rho_v);
        Rng pick(derive_seed({seed, 801}));
        double ra = 0, rv = 0;
        std::size_t counted_a = 0, counted_v = 0;
        for (std::size_t i = 0; i < ev.size(); ++i) {
            std::vector<std::size_t> row{i};
            auto b = data::make_batch(ev, row, dc.geometry);
            nc::NoGradGuard ng;
            auto enc = s.bb.encode_full(b.audio, b.video);
            auto ca = s.avm.cross_attention(enc.o_a, enc.o_v, tc.select.beta);
            auto imp = selection::importance_scores(ca.maps);
            std::vector<double> zero_a(n_a, 0.0), zero_v(n_v, 0.0);
            auto sa = selection::select_audio(imp.i_a.data(), zero_a, 1, data::audio_grid(dc.geometry.audio),
                                              tc.select.chunk, kap_a, pick);
            auto sv = selection::select_video(imp.i_v.data(), zero_v, 1, n_v, kap_v, pick);
            std::span<const std::uint8_t> ta(ev.audio_truth.data() + i * n_a, n_a);
            std::span<const std::uint8_t> tv(ev.video_truth.data() + i * n_v, n_v);
            if (auto q = eval::selection_quality(sa.row(0), ta).recall) {
                ra += *q;
                ++counted_a;
            }
            if (auto q = eval::selection_quality(sv.row(0), tv).recall) {
                rv += *q;
                ++counted_v;
            }
        }
        recall_a += ra / double(counted_a) / kSeeds;
        recall_v += rv / double(counted_v) / kSeeds;
    }
    const double base_a = double(kap_a) / double(n_a), base_v = double(kap_v) / double(n_v);
    const bool ok = recall_a >= kRecallFactor * base_a && recall_v >= kRecallFactor * base_v;
    return {ok, "audio recall " + fmt("%.3f", recall_a) + " (" + fmt("%.2f", recall_a / base_a) +
                    "x of kappa/M), video recall " + fmt("%.3f", recall_v) + " (" + fmt("%.2f", recall_v / base_v) +
                    "x of kappa/N), 3 seeds, " + std::to_string(kPretrainEpochs) + " epochs"};
}

// ---------------------------------------------------------------- 9, 10

struct EndToEnd {
    std::map<trainer::Strategy, std::vector<trainer::RunResult>> runs;
    double seconds = 0.0;
};

const EndToEnd& end_to_end() {
    static const EndToEnd result = [] {
        using trainer::Strategy;
        EndToEnd out;
        const auto t0 = std::chrono::steady_clock::now();
        data::DataConfig dc;  // 4 tasks x 5 classes, 256 train / 64 eval
        auto tasks = data::build_sequence(data::default_task_specs(dc), dc);
        backbone::BackboneConfig bc;
        for (auto s : {Strategy::stella, Strategy::random_select, Strategy::derpp, Strategy::stella_plus,
                       Strategy::finetune}) {
            for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
                trainer::TrainConfig tc;
                tc.strategy = s;
                tc.memory = trainer::uses_memory(s) ? 64 : 0;
                tc.optim.lr = kEndToEndLr;
                tc.seed = seed;
                auto r = trainer::run_sequence(tasks, tc, bc, dc.geometry);
                auto sum = trainer::summarize(r);
                std::cout << "    " << trainer::strategy_name(s) << " seed " << seed << ": A " << fmt("%.2f", sum.a)
                          << ", F " << fmt("%.2f", sum.f.value_or(0.0)) << ", gap decline "
                          << fmt("%.4f", sum.gap_decline.value_or(0.0)) << ", entries " << r.memory_entries << "/"
                          << r.memory_capacity << std::endl;
                out.runs[s].push_back(std::move(r));
            }
        }
        out.seconds = seconds_since(t0);
        return out;
    }();
    return result;
}

double mean_of(const std::vector<trainer::RunResult>& runs, const std::function<double(const trainer::Summary&)>& f) {
    double s = 0.0;
    for (const auto& r : runs) s += f(trainer::summarize(r));
    return s / double(runs.size());
}

Outcome end_to_end_direction() {
    using trainer::Strategy;
    const auto& e = end_to_end();
    auto a = [](const trainer::Summary& s) { return s.a; };
    auto f = [](const trainer::Summary& s) { return *s.f; };
    const double a_st = mean_of(e.runs.at(Strategy::stella), a);
    const double a_rs = mean_of(e.runs.at(Strategy::random_select), a);
    const double f_st = mean_of(e.runs.at(Strategy::stella), f);
    const double f_dp = mean_of(e.runs.at(Strategy::derpp), f);
    double entries_st = 0, entries_sp = 0;
    for (const auto& r : e.runs.at(Strategy::stella)) entries_st += double(r.memory_entries);
    for (const auto& r : e.runs.at(Strategy::stella_plus)) entries_sp += double(r.memory_entries);
    const double ratio = entries_sp / entries_st;
    const bool a_ok = a_st >= a_rs, f_ok = f_st <= f_dp, n_ok = ratio >= kEntryFactor;
    const bool t_ok = e.seconds < kEndToEndSeconds;
    return {a_ok && f_ok && n_ok && t_ok,
            "A stella " + fmt("%.2f", a_st) + (a_ok ? " >= " : " < ") + "random_select " + fmt("%.2f", a_rs) +
                "; F stella " + fmt("%.2f", f_st) + (f_ok ? " <= " : " > ") + "derpp " + fmt("%.2f", f_dp) +
                "; entries stella_plus/stella " + fmt("%.2f", ratio) + "; " + fmt("%.0f", e.seconds) +
                " s for all runs"};
}

Outcome modality_gap_tracking() {
    using trainer::Strategy;
    const auto& e = end_to_end();
    auto gd = [](const trainer::Summary& s) { return *s.gap_decline; };
    const double g_st = mean_of(e.runs.at(Strategy::stella), gd);
    const double g_ft = mean_of(e.runs.at(Strategy::finetune), gd);

    // joint rotation of both feature sets leaves the gap unchanged
    Rng rng(1001);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 5 + rng.index(20), d = 2 + rng.index(10);
        auto au = random_tensor({n, d}, rng, 1.0, false);
        auto vi = random_tensor({n, d}, rng, 1.0, false);
        // random orthogonal matrix by Gram-Schmidt
        std::vector<double> q(d * d);
        for (auto& x : q) x = rng.normal();
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < i; ++j) {
                double dot = 0;
                for (std::size_t c = 0; c < d; ++c) dot += q[i * d + c] * q[j * d + c];
                for (std::size_t c = 0; c < d; ++c) q[i * d + c] -= dot * q[j * d + c];
            }
            double norm = 0;
            for (std::size_t c = 0; c < d; ++c) norm += q[i * d + c] * q[i * d + c];
            for (std::size_t c = 0; c < d; ++c) q[i * d + c] /= std::sqrt(norm);
        }
        auto rot = Tensor::from({d, d}, q);
        const double before = eval::modality_gap(au, vi);
        const double after = eval::modality_gap(nc::matmul(au, rot), nc::matmul(vi, rot));
        worst = std::max(worst, std::abs(before - after));
    }
    std::size_t gap_rows = 0;
    for (const auto& r : e.runs.at(Strategy::stella)) gap_rows += r.gap.completed();
    const bool dir_ok = g_st <= g_ft;
    const bool ok = dir_ok && worst <= kRotationTol && gap_rows == kSeeds * 4;
    return {ok, "gap decline stella " + fmt("%.4f", g_st) + (dir_ok ? " <= " : " > ") + "finetune " +
                    fmt("%.4f", g_ft) + "; rotation invariance max diff " + fmt("%.1e", worst)};
}

// ---------------------------------------------------------------- 11

Outcome determinism_and_resume() {
    data::DataConfig dc;
    dc.num_tasks = 3;
    dc.train_per_task = 64;
    dc.eval_per_task = 32;
    auto tasks = data::build_sequence(data::default_task_specs(dc), dc);
    backbone::BackboneConfig bc;
    trainer::TrainConfig tc;
    tc.strategy = trainer::Strategy::stella;
    tc.epochs = 1;
    tc.optim.lr = kEndToEndLr;
    tc.seed = 11;

    auto root = std::filesystem::temp_directory_path() / "stella_acceptance_resume";
    std::filesystem::remove_all(root);
    auto first = trainer::run_sequence(tasks, tc, bc, dc.geometry);
    auto second = trainer::run_sequence(tasks, tc, bc, dc.geometry);
    const bool same = first.acc == second.acc && first.gap == second.gap;

    trainer::RunOptions part;
    part.out_dir = root / "run";
    part.stop_after_task = 2;
    trainer::run_sequence(tasks, tc, bc, dc.geometry, part);
    trainer::RunOptions rest;
    rest.out_dir = root / "run";
    rest.resume = true;
    auto resumed = trainer::run_sequence(tasks, tc, bc, dc.geometry, rest);
    const bool resumed_same = resumed.complete() && resumed.acc == first.acc;
    std::filesystem::remove_all(root);
    return {same && resumed_same, std::string("repeat run bit-identical: ") + (same ? "yes" : "no") +
                                      "; resumed after task 2 bit-identical: " + (resumed_same ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
    struct Criterion {
        int id;
        const char* title;
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> all = {
        {1, "gradient integrity", gradient_integrity},
        {2, "formula oracles", formula_oracles},
        {3, "selection exactness", selection_exactness},
        {4, "sampling statistics", sampling_statistics},
        {5, "degeneracy equivalences", degeneracy_equivalences},
        {6, "metric fidelity", metric_fidelity},
        {7, "AVM learnability", avm_learnability},
        {8, "selection quality", selection_quality},
        {9, "end-to-end direction", end_to_end_direction},
        {10, "modality-gap tracking", modality_gap_tracking},
        {11, "determinism and resume", determinism_and_resume},
    };

    bool strict = false;
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) {
        std::string arg = argv[i];
        if (arg == "--strict") {
            strict = true;
        } else {
            wanted.insert(std::stoi(arg));
        }
    }

    int failed = 0;
    for (const auto& c : all) {
        if (!wanted.empty() && !wanted.count(c.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << "criterion " << (c.id < 10 ? " " : "") << c.id << "  " << (o.pass ? "PASS" : "FAIL") << "  "
                  << c.title << ": " << o.detail << "  [" << fmt("%.1f", seconds_since(t0)) << " s]" << std::endl;
    }
    std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
    return strict && failed > 0 ? 1 : 0;
}
