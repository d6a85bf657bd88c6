// tgps: command-line entry point.
//
// Exit codes: 0 success, 1 invalid flags/config/input, 2 runtime failure.

#include <atomic>
#include <csignal>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <thread>

#include "tgps/commands.hpp"
#include "tgps/log.hpp"
#include "tgps/service.hpp"

#include "CLI11.hpp"

namespace {

using tgps::TrainConfig;

void add_config_options(CLI::App& app, TrainConfig& c) {
    const char* g = "Config";
    auto opt = [&](const char* name, auto& field, const char* desc) {
        app.add_option(name, field, desc)->capture_default_str()->group(g);
    };
    opt("--K", c.K, "number of basic poses");
    opt("--J", c.J, "joints per pose");
    opt("--H", c.H, "frame height");
    opt("--W", c.W, "frame width");
    opt("--r", c.r, "heatmap disk radius (px)");
    opt("--dilation", c.dilation, "pose-mask dilation (px)");
    opt("--kmeans_restarts", c.kmeans_restarts, "k-means++ restarts");
    opt("--L", c.L, "word-feature size");
    opt("--L_s", c.L_s, "sentence-vector size (must equal L)");
    opt("--N_max", c.N_max, "token capacity incl. bos/eos");
    opt("--embed_dim", c.embed_dim, "word-embedding size");
    opt("--min_freq", c.min_freq, "vocabulary minimum frequency");
    opt("--share_text_encoder", c.share_text_encoder, "reuse and freeze the stage I text encoder in stage II");
    opt("--ori_hidden", c.ori_hidden, "orientation-net hidden size");
    opt("--g1_width", c.g1_width, "G1 base channels");
    opt("--d1_width", c.d1_width, "D1 base channels");
    opt("--text_cond_dim", c.text_cond_dim, "projected text-condition channels");
    opt("--lambda1", c.lambda1, "stage I mse weight");
    opt("--lambda2", c.lambda2, "stage I orientation cross-entropy weight");
    opt("--steps_stage1", c.steps_stage1, "stage I steps");
    opt("--m", c.m, "attentional upsampling scales");
    opt("--g2_width", c.g2_width, "stage II encoder base channels");
    opt("--d2_width", c.d2_width, "D2 base channels");
    opt("--gamma1", c.gamma1, "stage II masked L1 weight");
    opt("--gamma2", c.gamma2, "stage II similarity-loss weight");
    opt("--steps_stage2", c.steps_stage2, "stage II steps");
    opt("--batch_size", c.batch_size, "batch size");
    opt("--lr_g", c.lr_g, "generator learning rate");
    opt("--lr_d", c.lr_d, "discriminator learning rate");
    opt("--beta1", c.beta1, "Adam beta1");
    opt("--seed", c.seed, "the single source of randomness");
    opt("--log_every", c.log_every, "steps between training log lines");
    opt("--test_fraction", c.test_fraction, "held-out identity fraction");
}

std::atomic<httplib::Server*> g_server{nullptr};

void on_signal(int) {
    if (auto* s = g_server.load()) s->stop();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Text-guided person image synthesis: pose prior, two-stage GAN training, inference, evaluation"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_config("--config", "", "key=value config file; flags override it");

    TrainConfig cfg;
    add_config_options(app, cfg);

    std::string manifest, out, stage1, stage2, image, caption, basics, vocab, metrics = "vqa,ssim,is";
    int identities = 8, per_identity = 2, port = 8080, max_conc = 4;

    auto* fx = app.add_subcommand("fixture", "write the synthetic fixture (PNGs + manifest.jsonl)");
    fx->add_option("--identities", identities, "identities")->capture_default_str();
    fx->add_option("--per-identity", per_identity, "images per identity")->capture_default_str();
    fx->add_option("--out", out, "output directory")->required();

    auto* cl = app.add_subcommand("cluster-poses", "cluster manifest poses into K basic poses");
    cl->add_option("--manifest", manifest, "manifest.jsonl")->required()->check(CLI::ExistingFile);
    cl->add_option("--out", out, "basic-pose JSON to write")->required();

    auto* t1 = app.add_subcommand("train-stage1", "train the text-guided pose generator");
    t1->add_option("--manifest", manifest, "manifest.jsonl")->required()->check(CLI::ExistingFile);
    t1->add_option("--basics", basics, "basic-pose JSON (default: cluster the manifest)")->check(CLI::ExistingFile);
    t1->add_option("--out", out, "output directory")->required();

    auto* t2 = app.add_subcommand("train-stage2", "train the pose- and attribute-transferred image generator");
    t2->add_option("--manifest", manifest, "manifest.jsonl")->required()->check(CLI::ExistingFile);
    t2->add_option("--stage1", stage1, "stage I checkpoint (basic poses, vocabulary, text encoder)")
        ->check(CLI::ExistingFile);
    t2->add_option("--out", out, "output directory")->required();

    auto* inf = app.add_subcommand("infer", "synthesize one image from a reference image and a caption");
    inf->add_option("--image", image, "reference PNG")->required()->check(CLI::ExistingFile);
    inf->add_option("--caption", caption, "caption")->required();
    inf->add_option("--stage1", stage1, "stage I checkpoint")->required()->check(CLI::ExistingFile);
    inf->add_option("--stage2", stage2, "stage II checkpoint")->required()->check(CLI::ExistingFile);
    inf->add_option("--out", out, "output directory")->required();

    auto* ev = app.add_subcommand("eval", "evaluate on the manifest's same-identity pairs");
    ev->add_option("--manifest", manifest, "manifest.jsonl")->required()->check(CLI::ExistingFile);
    ev->add_option("--stage1", stage1, "stage I checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("--stage2", stage2, "stage II checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("--metrics", metrics, "comma-separated subset of vqa,ssim,is")->capture_default_str();
    ev->add_option("--out", out, "report JSON (default: stdout)");

    auto* sv = app.add_subcommand("serve", "HTTP editing service");
    sv->add_option("--port", port, "listen port")->capture_default_str();
    sv->add_option("--stage1", stage1, "stage I checkpoint")->required()->check(CLI::ExistingFile);
    sv->add_option("--stage2", stage2, "stage II checkpoint")->required()->check(CLI::ExistingFile);
    sv->add_option("--basics", basics, "basic-pose JSON override")->check(CLI::ExistingFile);
    sv->add_option("--vocab", vocab, "vocabulary JSON (must match the checkpoints)")->check(CLI::ExistingFile);
    sv->add_option("--max-concurrency", max_conc, "concurrent synthesize requests before 429")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        namespace fs = std::filesystem;
        if (*fx) {
            std::cout << tgps::cmd::fixture(identities, per_identity, cfg.seed, out).string() << "\n";
        } else if (*cl) {
            const auto b = tgps::cmd::cluster_poses(manifest, cfg, out);
            std::cout << out << " (K=" << b.K() << ")\n";
        } else if (*t1) {
            std::optional<fs::path> b;
            if (!basics.empty()) b = basics;
            const auto o = tgps::cmd::train_stage1(manifest, cfg, out, b);
            std::cout << o.checkpoint.string() << "\n";
        } else if (*t2) {
            std::optional<fs::path> s;
            if (!stage1.empty()) s = stage1;
            const auto o = tgps::cmd::train_stage2(manifest, cfg, out, s);
            std::cout << o.checkpoint.string() << "\n";
        } else if (*inf) {
            const auto o = tgps::cmd::infer(image, caption, stage1, stage2, out);
            std::cout << o.summary.string() << "\n";
        } else if (*ev) {
            std::vector<std::string> list;
            std::stringstream ss(metrics);
            for (std::string m; std::getline(ss, m, ',');)
                if (!m.empty()) list.push_back(m);
            const auto report = tgps::cmd::eval(manifest, stage1, stage2, list, cfg.seed);
            if (out.empty())
                std::cout << report.dump(2) << "\n";
            else
                tgps::cmd::write_json(out, report);
        } else if (*sv) {
            tgps::EditService service(max_conc);
            httplib::Server server;
            service.mount(server);
            tgps::ServiceConfig sc;
            sc.stage1 = stage1;
            sc.stage2 = stage2;
            if (!basics.empty()) sc.basics = basics;
            if (!vocab.empty()) sc.vocab = vocab;
            if (!server.bind_to_port("0.0.0.0", port)) throw tgps::Error("cannot bind port " + std::to_string(port));
            std::thread loader([&] {
                try {
                    service.load(sc);
                    tgps::log_event("info", "model_loaded", {{"model_version", service.model_version()}});
                } catch (const std::exception& e) {
                    tgps::log_event("error", "model_load_failed", {{"error", e.what()}});
                    server.stop();
                }
            });
            g_server = &server;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            tgps::log_event("info", "listening", {{"port", port}});
            server.listen_after_bind();
            loader.join();
            if (!service.ready()) return 2;
        }
    } catch (const tgps::ValidationError& e) {
        std::cerr << "error: " << e.what() << " [field: " << e.field() << "]\n";
        return 1;
    } catch (const tgps::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const tgps::FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
