// Command-line front end: train / sample / transfer / restore / eval.
// Exit codes: 0 ok, 1 config or I/O problem, 2 numeric abort.

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flowsr/checkpoint.hpp"
#include "flowsr/config.hpp"
#include "flowsr/errors.hpp"
#include "flowsr/latent_toolkit.hpp"
#include "flowsr/metrics.hpp"
#include "flowsr/ppm.hpp"
#include "flowsr/training.hpp"

using namespace flowsr;

namespace {

Region parse_region(const std::string& s) {
    long long x = 0, y = 0, w = 0, h = 0;
    char extra = 0;
    if (std::sscanf(s.c_str(), "%lld,%lld,%lld,%lld%c", &x, &y, &w, &h, &extra) != 4)
        throw ConfigError("--region expects x,y,w,h, got '" + s + "'");
    if (w <= 0 || h <= 0) throw ConfigError("--region needs positive width and height");
    return Region{x, y, w, h};
}

std::vector<double> parse_tau_list(const std::string& s) {
    std::vector<double> out;
    std::istringstream is(s);
    std::string item;
    while (std::getline(is, item, ',')) {
        try {
            size_t pos = 0;
            out.push_back(std::stod(item, &pos));
            if (pos != item.size()) throw std::invalid_argument(item);
        } catch (...) {
            throw ConfigError("--tau-list: bad number '" + item + "'");
        }
        if (out.back() < 0.0) throw ConfigError("--tau-list: tau must be >= 0");
    }
    if (out.empty()) throw ConfigError("--tau-list is empty");
    return out;
}

// The reference downscale used by every command that needs one: the
// kernel kind is not part of the checkpoint arch block, so commands pin
// the antialiased bicubic protocol at the checkpoint's scale factor.
DownscaleKernel kernel_for(const RunConfig& cfg) {
    DownscaleKernel k;
    k.factor = cfg.scale_factor;
    return k;
}

void check_lr_divisibility(const Tensor& x, const RunConfig& cfg) {
    const int64_t div = int64_t(1) << cfg.levels;
    const int64_t hr_h = x.dim(2) * cfg.scale_factor;
    const int64_t hr_w = x.dim(3) * cfg.scale_factor;
    if (hr_h % div != 0 || hr_w % div != 0)
        throw ConfigError("LR image " + std::to_string(x.dim(3)) + "x" +
                          std::to_string(x.dim(2)) + " scales to HR " + std::to_string(hr_w) +
                          "x" + std::to_string(hr_h) + ", which must be divisible by 2^levels = " +
                          std::to_string(div));
}

// ---- train ----

struct TrainArgs {
    std::string config, out, csv, resume;
    uint64_t seed = 1;
    bool pretrain = false;
};

int run_train(const TrainArgs& a) {
    RunConfig cfg = load_config(a.config);
    cfg.validate();
    auto corpus = make_corpus(cfg.train_corpus());
    const Rng root(a.seed);

    std::optional<LoadedCheckpoint> lc;
    if (!a.resume.empty()) {
        lc = load_checkpoint(a.resume);
        if (serialize_arch_section(lc->cfg) != serialize_arch_section(cfg))
            throw ConfigError("checkpoint '" + a.resume +
                              "' was built with a different [arch] section than '" + a.config +
                              "'");
        if (!lc->has_optim)
            throw ConfigError("checkpoint '" + a.resume + "' has no optimizer state to resume");
    }
    std::optional<FlowModel> model_slot;
    std::optional<LrEncoder> enc_slot;
    if (lc) {
        model_slot.emplace(std::move(lc->model));
        enc_slot.emplace(std::move(lc->enc));
    } else {
        Rng mr = root.derive(0), er = root.derive(1);
        model_slot.emplace(cfg.arch(), mr);
        enc_slot.emplace(cfg.encoder(), er);
    }
    FlowModel& model = *model_slot;
    LrEncoder& enc = *enc_slot;

    if (a.pretrain) {
        if (lc) {
            std::cerr << "note: --pretrain-encoder ignored when resuming\n";
        } else {
            PretrainOptions po;
            po.steps = cfg.pretrain_steps;
            po.lr = cfg.pretrain_lr;
            po.batch = std::min<int64_t>(cfg.batch, cfg.data_count);
            Rng pr = root.derive(2);
            pretrain_encoder(enc, corpus, cfg.scale_factor, po, pr);
            std::cout << "pretrained encoder for " << po.steps << " steps\n";
        }
    }

    TrainConfig tc = cfg.train(a.seed);
    TrainReport rep =
        train(model, enc, corpus, tc, cfg.downscale_kernel(), lc ? &lc->resume : nullptr);

    const std::string csv_path = a.csv.empty() ? a.out + ".csv" : a.csv;
    {
        std::ofstream csv(csv_path);
        if (!csv) throw IoError("cannot write metrics CSV '" + csv_path + "'");
        write_train_csv(rep, csv);
    }
    if (rep.aborted) {
        std::cerr << "training aborted: " << rep.abort_reason << "\n";
        return 2;
    }
    TrainResume state{rep.next_step, rep.optim};
    save_checkpoint(a.out, cfg, model, enc, &state);
    if (!rep.log.empty())
        std::cout << "step " << rep.log.back().step << ": " << std::setprecision(6)
                  << rep.log.back().bits_per_dim << " bits/dim\n";
    std::cout << "wrote " << a.out << " and " << csv_path << "\n";
    return 0;
}

// ---- sample ----

struct SampleArgs {
    std::string ckpt, lr_image, out_dir = ".";
    double tau = 0.8;
    int64_t n = 1;
    uint64_t seed = 1;
};

int run_sample(const SampleArgs& a) {
    LoadedCheckpoint lc = load_checkpoint(a.ckpt);
    Tensor x = read_ppm(a.lr_image);
    check_lr_divisibility(x, lc.cfg);
    int64_t n = a.n;
    if (n < 1) throw ConfigError("--n must be >= 1");
    if (a.tau == 0.0 && n > 1) {
        std::cerr << "note: tau 0 is deterministic, writing a single sample\n";
        n = 1;
    }
    Tensor u = lc.enc.forward(x);
    const Rng root(a.seed);
    for (int64_t k = 0; k < n; ++k) {
        Rng rng = root.derive(uint64_t(k));
        Tensor y = lc.model.sample(u, a.tau, rng);
        char name[32];
        std::snprintf(name, sizeof name, "sample_%03d.ppm", int(k));
        const std::string path = a.out_dir + "/" + name;
        write_ppm(path, y);
        std::cout << path << "\n";
    }
    return 0;
}

// ---- transfer ----

struct TransferArgs {
    std::string ckpt, mode, source, target, region, out;
    double tau = 0.8;
    uint64_t seed = 1;
};

int run_transfer(const TransferArgs& a) {
    LoadedCheckpoint lc = load_checkpoint(a.ckpt);
    const DownscaleKernel kernel = kernel_for(lc.cfg);
    const Rng rng(a.seed);
    Tensor out;
    if (a.mode == "style") {
        Tensor y_src = read_ppm(a.source);
        Tensor x_tgt = read_ppm(a.target);
        if (a.region.empty()) {
            out = style_transfer(lc.model, lc.enc, kernel, y_src, x_tgt, a.tau, rng);
        } else {
            Region rg = parse_region(a.region);
            out = style_transfer(lc.model, lc.enc, kernel, y_src, x_tgt, a.tau, rng, &rg);
        }
    } else if (a.mode == "content") {
        if (a.region.empty())
            throw ConfigError("content mode requires --region (where to place the patch)");
        Region rg = parse_region(a.region);
        Tensor donor = read_ppm(a.source);
        Tensor base = read_ppm(a.target);
        if (rg.x < 0 || rg.y < 0 || rg.x + rg.w > donor.dim(3) || rg.y + rg.h > donor.dim(2))
            throw ConfigError("--region lies outside the source image");
        Tensor patch({1, 3, rg.h, rg.w});
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t y = 0; y < rg.h; ++y)
                for (int64_t x = 0; x < rg.w; ++x)
                    patch.at4(0, c, y, x) = donor.at4(0, c, rg.y + y, rg.x + x);
        out = content_transfer(lc.model, lc.enc, kernel, base, patch, rg.x, rg.y, a.tau, rng);
    } else {
        throw ConfigError("--mode must be style or content, got '" + a.mode + "'");
    }
    write_ppm(a.out, out);
    std::cout << a.out << "\n";
    return 0;
}

// ---- restore ----

struct RestoreArgs {
    std::string ckpt, image, out, reference;
    double tau = 0.8;
    uint64_t seed = 1;
};

int run_restore(const RestoreArgs& a) {
    LoadedCheckpoint lc = load_checkpoint(a.ckpt);
    const DownscaleKernel kernel = kernel_for(lc.cfg);
    Tensor y = read_ppm(a.image);
    const Rng root(a.seed);
    Tensor restored = restore(lc.model, lc.enc, kernel, y, a.tau, root);
    write_ppm(a.out, restored);
    std::cout << a.out << "\n";
    if (!a.reference.empty()) {
        Tensor ref = read_ppm(a.reference);
        // Baseline: plain SR of the degraded image's own downscale, so
        // the two printed numbers compare the same conditioning.
        Tensor x = downscale(y, kernel);
        Tensor u = lc.enc.forward(x);
        Rng sr_rng = root.derive(2);  // restore() itself consumed streams 0 and 1
        Tensor direct = lc.model.sample(u, a.tau, sr_rng);
        for (int64_t i = 0; i < direct.numel(); ++i)  // compare at output precision
            direct.data()[i] = double(quantize8(direct.data()[i])) / 255.0;
        std::cout << std::setprecision(10);
        std::cout << "restored_psnr_db=" << psnr(read_ppm(a.out), ref) << "\n";
        std::cout << "direct_sr_psnr_db=" << psnr(direct, ref) << "\n";
    }
    return 0;
}

// ---- eval ----

struct EvalArgs {
    std::string ckpt, config, tau_list, out;
    int64_t samples = 0;  // 0 = take from config
    uint64_t seed = 1;
};

int run_eval(const EvalArgs& a) {
    LoadedCheckpoint lc = load_checkpoint(a.ckpt);
    RunConfig cfg = a.config.empty() ? RunConfig{} : load_config(a.config);
    CorpusConfig cc = cfg.eval_corpus();
    cc.kernel.factor = lc.cfg.scale_factor;  // dataset must match the model's scale
    auto eval_set = make_corpus(cc);
    const std::vector<double> taus =
        a.tau_list.empty() ? cfg.eval_taus : parse_tau_list(a.tau_list);
    const int64_t samples = a.samples > 0 ? a.samples : cfg.eval_samples;
    auto rows = eval_sweep(lc.model, lc.enc, eval_set, taus, samples, cc.kernel, Rng(a.seed));
    std::ofstream out(a.out);
    if (!out) throw IoError("cannot write CSV '" + a.out + "'");
    write_eval_csv(rows, out);
    std::cout << "wrote " << a.out << " (" << rows.size() << " rows, " << eval_set.size()
              << " images)\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"conditional-flow super-resolution"};
    app.require_subcommand(1);

    TrainArgs ta;
    CLI::App* train_cmd = app.add_subcommand("train", "train a model on the synthetic corpus");
    train_cmd->add_option("--config", ta.config, "run config file")->required();
    train_cmd->add_option("--out", ta.out, "checkpoint to write")->required();
    train_cmd->add_option("--csv", ta.csv, "metrics CSV path (default <out>.csv)");
    train_cmd->add_option("--seed", ta.seed, "training seed");
    train_cmd->add_flag("--pretrain-encoder", ta.pretrain,
                        "L1-pretrain the LR encoder first (fresh runs only)");
    train_cmd->add_option("--resume", ta.resume, "continue from a checkpoint");

    SampleArgs sa;
    CLI::App* sample_cmd = app.add_subcommand("sample", "super-resolve an LR image");
    sample_cmd->add_option("--ckpt", sa.ckpt, "trained checkpoint")->required();
    sample_cmd->add_option("--lr-image", sa.lr_image, "input PPM")->required();
    sample_cmd->add_option("--tau", sa.tau, "sampling temperature (default 0.8)");
    sample_cmd->add_option("--n", sa.n, "number of samples");
    sample_cmd->add_option("--seed", sa.seed, "sampling seed");
    sample_cmd->add_option("--out-dir", sa.out_dir, "output directory");

    TransferArgs xa;
    CLI::App* transfer_cmd =
        app.add_subcommand("transfer", "latent style or content transfer");
    transfer_cmd->add_option("--ckpt", xa.ckpt, "trained checkpoint")->required();
    transfer_cmd->add_option("--mode", xa.mode, "style | content")->required();
    transfer_cmd->add_option("--source", xa.source, "HR source image (style/content donor)")
        ->required();
    transfer_cmd->add_option("--target", xa.target,
                             "style: target LR image; content: base HR image")
        ->required();
    transfer_cmd->add_option("--region", xa.region, "x,y,w,h (style: optional, content: required)");
    transfer_cmd->add_option("--tau", xa.tau, "temperature for refreshed latents");
    transfer_cmd->add_option("--seed", xa.seed, "seed");
    transfer_cmd->add_option("--out", xa.out, "output PPM")->required();

    RestoreArgs ra;
    CLI::App* restore_cmd = app.add_subcommand("restore", "project a degraded image onto the model");
    restore_cmd->add_option("--ckpt", ra.ckpt, "trained checkpoint")->required();
    restore_cmd->add_option("--image", ra.image, "degraded HR image")->required();
    restore_cmd->add_option("--tau", ra.tau, "normalization temperature");
    restore_cmd->add_option("--seed", ra.seed, "seed");
    restore_cmd->add_option("--out", ra.out, "output PPM")->required();
    restore_cmd->add_option("--reference", ra.reference,
                            "clean reference; prints restored and direct-SR PSNR");

    EvalArgs ea;
    CLI::App* eval_cmd = app.add_subcommand("eval", "temperature sweep over a synthetic eval set");
    eval_cmd->add_option("--ckpt", ea.ckpt, "trained checkpoint")->required();
    eval_cmd->add_option("--config", ea.config, "config supplying [data]/[eval] sections");
    eval_cmd->add_option("--tau-list", ea.tau_list, "comma-separated temperatures");
    eval_cmd->add_option("--samples", ea.samples, "samples per image");
    eval_cmd->add_option("--seed", ea.seed, "seed");
    eval_cmd->add_option("--out", ea.out, "CSV to write")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (train_cmd->parsed()) return run_train(ta);
        if (sample_cmd->parsed()) return run_sample(sa);
        if (transfer_cmd->parsed()) return run_transfer(xa);
        if (restore_cmd->parsed()) return run_restore(ra);
        if (eval_cmd->parsed()) return run_eval(ea);
    } catch (const SingularError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
