#include "stella/trainer/trainer.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "stella/numcore/ops.hpp"

namespace stella::trainer {

namespace {

constexpr const char* kStrategyNames[] = {"finetune", "er", "derpp", "random_select", "stella", "stella_plus"};

// Row i of a [B, ...] tensor as a standalone [...] tensor.
Tensor row_of(const Tensor& t, std::size_t i) {
    nc::Shape shape(t.shape().begin() + 1, t.shape().end());
    return nc::reshape(nc::slice(t.detach(), 0, i, i + 1), shape);
}

std::vector<double> row_values(std::span<const double> flat, std::size_t i, std::size_t width) {
    return {flat.begin() + static_cast<long>(i * width), flat.begin() + static_cast<long>((i + 1) * width)};
}

data::PatchSet join(const data::PatchSet& x, const data::PatchSet& y) {
    if (!y.patches.defined()) {
        return x;
    }
    data::PatchSet out = x;
    out.patches = nc::concat({x.patches, y.patches}, 0);
    out.indices.insert(out.indices.end(), y.indices.begin(), y.indices.end());
    return out;
}

Tensor string_tensor(const std::string& s) {
    const std::size_t n = s.size();
    return Tensor::from({n}, std::vector<double>(s.begin(), s.end()));
}

std::string tensor_string(const Tensor& t) {
    std::string s;
    s.reserve(t.numel());
    for (double x : t.data()) s.push_back(static_cast<char>(static_cast<int>(x)));
    return s;
}

std::string snapshot_name(std::size_t task) { return "task_" + std::to_string(task) + ".bin"; }

void write_loss_header(std::ostream& os) { os << "step,l_r,l_c,l_p,l_avm\n"; }

void write_loss(std::ostream& os, const StepRecord& r) {
    os << r.step << ',' << r.l_r << ',' << r.l_c << ',' << r.l_p << ',' << r.l_avm << '\n';
}

// Drops rows at or past `steps` (written after the checkpoint).
void truncate_losses(const std::filesystem::path& file, std::uint64_t steps) {
    std::ifstream is(file);
    if (!is) throw std::runtime_error("cannot read " + file.string());
    std::string header, line;
    std::getline(is, header);
    std::vector<std::string> keep;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (std::stoull(line.substr(0, line.find(','))) < steps) keep.push_back(line);
    }
    is.close();
    std::ofstream os(file, std::ios::trunc);
    os << header << '\n';
    for (const auto& l : keep) os << l << '\n';
    if (!os) throw std::runtime_error("cannot rewrite " + file.string());
}

bool finite(const StepRecord& r) {
    return std::isfinite(r.l_r) && std::isfinite(r.l_c) && std::isfinite(r.l_p) && std::isfinite(r.l_avm) &&
           std::isfinite(r.total);
}

}  // namespace

const char* strategy_name(Strategy s) { return kStrategyNames[static_cast<int>(s)]; }

Strategy parse_strategy(const std::string& name) {
    for (int i = 0; i < 6; ++i) {
        if (name == kStrategyNames[i]) return static_cast<Strategy>(i);
    }
    throw ConfigError("unknown strategy '" + name + "'");
}

bool uses_memory(Strategy s) { return s != Strategy::finetune; }
bool uses_penalty(Strategy s) { return uses_memory(s) && s != Strategy::er; }
bool uses_selection(Strategy s) {
    return s == Strategy::random_select || s == Strategy::stella || s == Strategy::stella_plus;
}
bool uses_avm(Strategy s) { return s == Strategy::stella || s == Strategy::stella_plus; }

void TrainConfig::validate() const {
    if (batch < 2) throw ConfigError("batch size must be at least 2");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
    if (!(optim.lr > 0.0) || !(avm_lr > 0.0)) throw ConfigError("learning rates must be positive");
    if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0) || !(optim.beta2 >= 0.0 && optim.beta2 < 1.0)) {
        throw ConfigError("optimizer moments must lie in [0, 1)");
    }
    if (!(optim.eps > 0.0)) throw ConfigError("optimizer eps must be positive");
    try {
        select.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

Streams::Streams(std::uint64_t seed)
    : shuffle(derive_seed({seed, 11})),
      mask(derive_seed({seed, 12})),
      select(derive_seed({seed, 13})),
      replay(derive_seed({seed, 14})),
      reservoir(derive_seed({seed, 15})),
      avm(derive_seed({seed, 16})) {}

std::vector<std::pair<std::string, Rng*>> Streams::named() {
    return {{"shuffle", &shuffle}, {"mask", &mask},           {"select", &select},
            {"replay", &replay},   {"reservoir", &reservoir}, {"avm", &avm}};
}

namespace {

nc::AdamConfig avm_optim(const TrainConfig& cfg) {
    nc::AdamConfig c = cfg.optim;
    c.lr = cfg.avm_lr;
    return c;
}

}  // namespace

RunState::RunState(const TrainConfig& cfg, const backbone::BackboneConfig& model, const data::Geometry& geometry,
                   std::size_t tasks)
    : bb(model, geometry, derive_seed({cfg.seed, 1})),
      avm(model.embed_dim, model.heads, derive_seed({cfg.seed, 2})),
      opt(bb.params().tensors(), cfg.optim),
      avm_opt(avm.params().tensors(), avm_optim(cfg)),
      memory(uses_memory(cfg.strategy) ? memory_capacity(cfg, geometry) : 0),
      rng(cfg.seed),
      acc(tasks),
      gap(tasks) {}

std::size_t memory_capacity(const TrainConfig& cfg, const data::Geometry& geometry) {
    if (cfg.strategy != Strategy::stella_plus) {
        return cfg.memory;
    }
    const std::size_t m = geometry.audio.num_patches(), n = geometry.video.num_patches();
    const std::size_t pa = geometry.audio.patch_dim(), pv = geometry.video.patch_dim();
    const std::size_t ka = selection::kappa(m, cfg.select.rho_a), kv = selection::kappa(n, cfg.select.rho_v);
    return memory::equalized_capacity(cfg.memory, 8 * (m * pa + n * pv), 8 * (ka * pa + kv * pv));
}

StepRecord train_step(RunState& s, const TrainConfig& cfg, const data::Batch& current) {
    const Strategy st = cfg.strategy;
    const data::Geometry& geo = s.bb.geometry();
    const data::GridGeometry grid_a = data::audio_grid(geo.audio);
    const std::size_t b = current.audio.batch(), m = current.audio.count(), n = current.video.count();
    if (b < 2 || current.video.batch() != b) {
        throw std::invalid_argument("train_step needs a paired batch of at least 2 rows");
    }
    const bool selecting = uses_selection(st);
    const std::size_t ka = selecting ? selection::kappa(m, cfg.select.rho_a) : m;
    const std::size_t kv = selecting ? selection::kappa(n, cfg.select.rho_v) : n;
    const std::size_t chunk = cfg.select.chunk;
    s.bb.params().zero_grad();

    // AVM maps, importance and localized queries of the current batch
    Tensor ea, ev;
    backbone::TokenLayout la, lv;
    selection::Importance imp;
    selection::LocalizedQueries loc_a, loc_v;
    if (uses_avm(st)) {
        nc::NoGradGuard no_grad;
        la = backbone::make_layout(backbone::Mask(b * m, 0), b, m);
        lv = backbone::make_layout(backbone::Mask(b * n, 0), b, n);
        ea = s.bb.encode_audio(s.bb.embed(current.audio), la);
        ev = s.bb.encode_video(s.bb.embed(current.video), lv);
        auto [o_a, o_v] = s.bb.fuse_joint(ea, ev, la, lv);
        auto ca = s.avm.cross_attention(o_a, o_v, cfg.select.beta);
        imp = selection::importance_scores(ca.maps);
        loc_a = selection::gather_localized(ca.proj.q_a, ca.proj.k_a, imp.i_a, ka);
        loc_v = selection::gather_localized(ca.proj.q_v, ca.proj.k_v, imp.i_v, kv);
    }

    const bool replay = uses_memory(st) && !s.memory.empty();
    memory::ReplayBatch rb;
    if (replay) {
        rb = memory::assemble(s.memory, s.memory.sample(b, s.rng.replay), geo);
    }
    const std::size_t bp = replay ? rb.size() : 0;

    // current row i is compared against the pooled queries of replay row i
    std::vector<double> c_a(b * m, 0.0), c_v(b * n, 0.0);
    if (uses_avm(st) && replay) {
        nc::NoGradGuard no_grad;
        std::vector<std::size_t> pair(b);
        for (std::size_t i = 0; i < b; ++i) pair[i] = i % bp;
        Tensor corr_a = selection::correlation_scores(loc_a.k_hat, loc_v.q_hat, nc::index_select(rb.q_v, 0, pair),
                                                      cfg.select.beta);
        Tensor corr_v = selection::correlation_scores(loc_v.k_hat, loc_a.q_hat, nc::index_select(rb.q_a, 0, pair),
                                                      cfg.select.beta);
        c_a = selection::expand_scores(corr_a, loc_a.top, m);
        c_v = selection::expand_scores(corr_v, loc_v.top, n);
    }

    selection::Selection sel_a, sel_v;
    if (uses_avm(st)) {
        sel_a = selection::select_audio(imp.i_a.data(), c_a, b, grid_a, chunk, ka, s.rng.select);
        sel_v = selection::select_video(imp.i_v.data(), c_v, b, n, kv, s.rng.select);
    } else if (st == Strategy::random_select) {
        sel_a = selection::random_audio(b, grid_a, chunk, ka, s.rng.select);
        sel_v = selection::random_video(b, n, kv, s.rng.select);
    }
    data::PatchSet xa = current.audio, xv = current.video;
    if (selecting) {
        xa = selection::gather_selected(current.audio, sel_a.indices, ka);
        xv = selection::gather_selected(current.video, sel_v.indices, kv);
    }

    data::PatchSet ra, rv;
    if (replay) {
        ra = rb.audio;
        rv = rb.video;
        if (st == Strategy::stella) {
            auto pa = selection::select_audio(rb.i_a, rb.c_a, bp, grid_a, chunk, ka, s.rng.select);
            auto pv = selection::select_video(rb.i_v, rb.c_v, bp, n, kv, s.rng.select);
            ra = selection::gather_selected(rb.audio, pa.indices, ka);
            rv = selection::gather_selected(rb.video, pv.indices, kv);
        } else if (st == Strategy::random_select) {
            auto pa = selection::random_audio(bp, grid_a, chunk, ka, s.rng.select);
            auto pv = selection::random_video(bp, n, kv, s.rng.select);
            ra = selection::gather_selected(rb.audio, pa.indices, ka);
            rv = selection::gather_selected(rb.video, pv.indices, kv);
        }
        if (ra.count() != xa.count() || rv.count() != xv.count()) {
            throw memory::MemoryError("replayed rows hold " + std::to_string(ra.count()) + "/" +
                                      std::to_string(rv.count()) + " patches, current rows " +
                                      std::to_string(xa.count()) + "/" + std::to_string(xv.count()));
        }
    }

    const data::PatchSet all_a = join(xa, ra), all_v = join(xv, rv);
    const std::size_t rows = b + bp;
    const auto& mc = s.bb.config();
    auto m_a = backbone::random_masks(rows, all_a.count(), mc.mask_prob, s.rng.mask);
    auto m_v = backbone::random_masks(rows, all_v.count(), mc.mask_prob, s.rng.mask);

    StepRecord rec;
    rec.step = s.step;
    try {
        auto fr = s.bb.forward(all_a, all_v, m_a, m_v);
        Tensor l_c = backbone::contrastive_loss(fr.c_a, fr.c_v, mc.tau);
        Tensor l_p;
        if (uses_penalty(st) && replay) {
            l_p = memory::der_penalty(nc::slice(fr.c_a, 0, b, rows), nc::slice(fr.c_v, 0, b, rows), rb.feat_a,
                                      rb.feat_v);
        }
        Tensor total = backbone::pretrain_objective(fr.l_r, l_c, l_p, mc.lambda, uses_penalty(st) ? cfg.alpha : 0.0);

        if (uses_memory(st)) {
            nc::NoGradGuard no_grad;
            for (std::size_t i = 0; i < b; ++i) {
                memory::RehearsalEntry e;
                e.step = s.step;
                if (st == Strategy::stella_plus) {
                    e.layout = memory::Layout::selected;
                    e.audio = row_of(xa.patches, i);
                    e.video = row_of(xv.patches, i);
                    auto ia = sel_a.row(i), iv = sel_v.row(i);
                    e.audio_idx.assign(ia.begin(), ia.end());
                    e.video_idx.assign(iv.begin(), iv.end());
                } else {
                    e.audio = row_of(current.audio.patches, i);
                    e.video = row_of(current.video.patches, i);
                }
                if (uses_avm(st)) {
                    e.q_a = row_of(loc_a.q_hat, i);
                    e.q_v = row_of(loc_v.q_hat, i);
                }
                if (st == Strategy::stella) {
                    e.i_a = row_values(imp.i_a.data(), i, m);
                    e.i_v = row_values(imp.i_v.data(), i, n);
                    e.c_a = row_values(c_a, i, m);
                    e.c_v = row_values(c_v, i, n);
                }
                if (uses_penalty(st)) {
                    e.feat_a = row_of(fr.c_a, i);
                    e.feat_v = row_of(fr.c_v, i);
                }
                s.memory.insert(std::move(e), s.rng.reservoir);
            }
        }

        if (uses_avm(st)) {
            rec.l_avm = avm::avm_train_step(s.bb, ea, ev, la, lv, s.avm, s.avm_opt, s.rng.avm).loss;
        }

        rec.l_r = fr.l_r.item();
        rec.l_c = l_c.item();
        rec.l_p = l_p.defined() ? l_p.item() : 0.0;
        rec.total = total.item();
        if (!finite(rec)) {
            throw DivergenceError("non-finite loss at step " + std::to_string(s.step));
        }
        nc::backward(total);
        s.opt.step();
    } catch (const nc::NumericError& e) {
        throw DivergenceError("step " + std::to_string(s.step) + ": " + e.what());
    }
    ++s.step;
    return rec;
}

std::vector<nc::NamedTensor> state_tensors(const RunState& s, const TrainConfig& cfg) {
    std::vector<nc::NamedTensor> t = s.bb.state("backbone/");
    auto add = [&](std::vector<nc::NamedTensor> more) { t.insert(t.end(), more.begin(), more.end()); };
    add(s.avm.state("avm/"));
    add(s.opt.state("opt/"));
    add(s.avm_opt.state("avm_opt/"));
    for (auto& [name, rng] : const_cast<Streams&>(s.rng).named()) {
        t.push_back({"rng/" + name, string_tensor(rng->state())});
    }
    t.push_back({"meta/step", Tensor::scalar(static_cast<double>(s.step))});
    t.push_back({"meta/tasks_done", Tensor::scalar(static_cast<double>(s.tasks_done))});
    t.push_back({"meta/tasks", Tensor::scalar(static_cast<double>(s.acc.tasks()))});
    t.push_back({"meta/strategy", Tensor::scalar(static_cast<double>(cfg.strategy))});
    t.push_back({"meta/seed_hi", Tensor::scalar(static_cast<double>(cfg.seed >> 32))});
    t.push_back({"meta/seed_lo", Tensor::scalar(static_cast<double>(cfg.seed & 0xffffffffULL))});
    for (std::size_t r = 0; r < s.tasks_done; ++r) {
        t.push_back({"acc/" + std::to_string(r), Tensor::from({r + 1}, s.acc.rows()[r])});
        t.push_back({"gap/" + std::to_string(r), Tensor::from({r + 1}, s.gap.rows()[r])});
    }
    for (std::size_t i = 0; i < s.latest.size(); ++i) {
        const auto& rep = s.latest[i];
        t.push_back({"recall/" + std::to_string(i),
                     Tensor::from({7}, {rep.a2v[0], rep.a2v[1], rep.a2v[2], rep.v2a[0], rep.v2a[1], rep.v2a[2],
                                        static_cast<double>(rep.n)})});
    }
    return t;
}

void load_state_tensors(RunState& s, const TrainConfig& cfg, const std::vector<nc::NamedTensor>& t) {
    auto meta = [&](const char* name) { return nc::find_tensor(t, std::string("meta/") + name).item(); };
    if (static_cast<int>(meta("strategy")) != static_cast<int>(cfg.strategy) ||
        static_cast<std::uint64_t>(meta("seed_hi")) != (cfg.seed >> 32) ||
        static_cast<std::uint64_t>(meta("seed_lo")) != (cfg.seed & 0xffffffffULL)) {
        throw ConfigError("checkpoint was written with a different strategy or seed");
    }
    if (static_cast<std::size_t>(meta("tasks")) != s.acc.tasks()) {
        throw ConfigError("checkpoint covers a different number of tasks");
    }
    s.bb.load(t, "backbone/");
    s.avm.load(t, "avm/");
    s.opt.load_state(t, "opt/");
    s.avm_opt.load_state(t, "avm_opt/");
    for (auto& [name, rng] : s.rng.named()) rng->set_state(tensor_string(nc::find_tensor(t, "rng/" + name)));
    s.step = static_cast<std::uint64_t>(meta("step"));
    s.tasks_done = static_cast<std::size_t>(meta("tasks_done"));
    s.acc = eval::AccMatrix(s.acc.tasks());
    s.gap = eval::AccMatrix(s.gap.tasks());
    for (std::size_t r = 0; r < s.tasks_done; ++r) {
        const auto& a = nc::find_tensor(t, "acc/" + std::to_string(r));
        const auto& g = nc::find_tensor(t, "gap/" + std::to_string(r));
        s.acc.set_row(r, {a.data().begin(), a.data().end()});
        s.gap.set_row(r, {g.data().begin(), g.data().end()});
    }
    s.latest.clear();
    for (std::size_t i = 0; i < s.tasks_done; ++i) {
        const auto& v = nc::find_tensor(t, "recall/" + std::to_string(i)).data();
        eval::RetrievalReport rep;
        for (std::size_t k = 0; k < 3; ++k) {
            rep.a2v[k] = v[k];
            rep.v2a[k] = v[3 + k];
        }
        rep.n = static_cast<std::size_t>(v[6]);
        s.latest.push_back(rep);
    }
}

RunResult run_sequence(const std::vector<data::TaskDataset>& tasks, const TrainConfig& cfg,
                       const backbone::BackboneConfig& model, const data::Geometry& geometry,
                       const RunOptions& opts) {
    cfg.validate();
    if (tasks.empty()) {
        throw std::invalid_argument("run_sequence needs at least one task");
    }
    RunState s(cfg, model, geometry, tasks.size());
    std::ofstream losses;
    std::filesystem::path dir;
    if (opts.out_dir) {
        dir = *opts.out_dir;
        std::filesystem::create_directories(dir / "memory");
        if (opts.resume) {
            load_state_tensors(s, cfg, nc::load_checkpoint(dir / "checkpoint.bin"));
            if (s.tasks_done > 0 && uses_memory(cfg.strategy)) {
                s.memory = memory::load_memory(dir / "memory" / snapshot_name(s.tasks_done - 1));
                if (s.memory.capacity() != memory_capacity(cfg, geometry)) {
                    throw ConfigError("memory snapshot capacity disagrees with the config");
                }
            }
            truncate_losses(dir / "losses.csv", s.step);
            losses.open(dir / "losses.csv", std::ios::app);
        } else {
            losses.open(dir / "losses.csv", std::ios::trunc);
            write_loss_header(losses);
        }
        if (!losses) throw std::runtime_error("cannot write " + (dir / "losses.csv").string());
        losses.precision(17);
    } else if (opts.resume) {
        throw std::invalid_argument("resume needs a run directory");
    }

    RunResult r;
    for (std::size_t t = s.tasks_done; t < tasks.size(); ++t) {
        if (opts.stop_after_task && t >= *opts.stop_after_task) break;
        const data::PatchBank& bank = tasks[t].train;
        const std::size_t steps = bank.size() / cfg.batch;
        if (steps == 0) {
            throw std::invalid_argument("task " + std::to_string(t) + " has fewer rows than one batch");
        }
        for (std::size_t e = 0; e < cfg.epochs; ++e) {
            auto perm = s.rng.shuffle.permutation(bank.size());
            for (std::size_t k = 0; k < steps; ++k) {
                std::span<const std::size_t> rows(perm.data() + k * cfg.batch, cfg.batch);
                auto rec = train_step(s, cfg, data::make_batch(bank, rows, geometry));
                r.losses.push_back(rec);
                if (losses.is_open()) write_loss(losses, rec);
                if (opts.on_step) opts.on_step(rec);
            }
        }

        std::vector<double> acc_row, gap_row;
        s.latest.clear();
        for (std::size_t i = 0; i <= t; ++i) {
            auto te = eval::evaluate_bank(s.bb, tasks[i].eval, geometry, opts.eval_workers);
            acc_row.push_back(te.retrieval.headline());
            gap_row.push_back(te.gap);
            s.latest.push_back(te.retrieval);
        }
        s.acc.set_row(t, acc_row);
        s.gap.set_row(t, gap_row);
        s.tasks_done = t + 1;

        if (opts.out_dir) {
            write_matrix_csv(dir / "acc_matrix.csv", s.acc);
            write_matrix_csv(dir / "gap_matrix.csv", s.gap);
            memory::save_memory(dir / "memory" / snapshot_name(t), s.memory);
            losses.flush();
            auto tmp = dir / "checkpoint.bin.tmp";
            nc::save_checkpoint(tmp, state_tensors(s, cfg));
            std::filesystem::rename(tmp, dir / "checkpoint.bin");
        }
    }

    r.acc = s.acc;
    r.gap = s.gap;
    r.tasks_done = s.tasks_done;
    r.steps = s.step;
    r.memory_entries = s.memory.size();
    r.memory_capacity = s.memory.capacity();
    if (r.complete()) r.final_reports = s.latest;
    return r;
}

Summary summarize(const RunResult& r) {
    if (!r.complete()) {
        throw std::invalid_argument("summary needs a completed run");
    }
    Summary out;
    out.a = eval::average_accuracy(r.acc);
    if (r.acc.tasks() >= 2) {
        out.f = eval::average_forgetting(r.acc);
        out.gap_decline = eval::gap_decline(r.gap);
    }
    const double n = static_cast<double>(r.final_reports.size());
    for (const auto& rep : r.final_reports) {
        for (std::size_t k = 0; k < 3; ++k) {
            out.a2v[k] += rep.a2v[k] / n;
            out.v2a[k] += rep.v2a[k] / n;
        }
    }
    return out;
}

void write_matrix_csv(const std::filesystem::path& file, const eval::AccMatrix& m) {
    std::ofstream os(file);
    if (!os) throw std::runtime_error("cannot write " + file.string());
    os.precision(17);
    os << "after_task";
    for (std::size_t i = 0; i < m.tasks(); ++i) os << ",task_" << i;
    os << '\n';
    for (std::size_t t = 0; t < m.completed(); ++t) {
        os << t;
        for (std::size_t i = 0; i < m.tasks(); ++i) {
            os << ',';
            if (i <= t) os << m.at(t, i);
        }
        os << '\n';
    }
    if (!os) throw std::runtime_error("write failed: " + file.string());
}

eval::AccMatrix read_matrix_csv(const std::filesystem::path& file) {
    std::ifstream is(file);
    if (!is) throw std::runtime_error("cannot read " + file.string());
    std::string line;
    std::getline(is, line);
    const std::size_t tasks = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
    eval::AccMatrix m(tasks);
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');
        const std::size_t t = std::stoul(cell);
        std::vector<double> row;
        while (std::getline(ss, cell, ',')) {
            if (!cell.empty()) row.push_back(std::stod(cell));
        }
        m.set_row(t, row);
    }
    return m;
}

}  // namespace stella::trainer
