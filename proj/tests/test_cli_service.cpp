#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

#include "tgps/commands.hpp"
#include "tgps/service.hpp"

using namespace tgps;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

// Untrained checkpoints on a small fixture; shared by every test in this file.
struct World {
    fs::path dir, manifest, stage1, stage2;
    TrainConfig cfg;

    World() {
        dir = fs::temp_directory_path() / ("tgps_cli_" + std::to_string(::getpid()));
        fs::remove_all(dir);
        manifest = cmd::fixture(8, 2, 5, dir / "fx");
        cfg.L = cfg.L_s = 8;
        cfg.embed_dim = 4;
        cfg.ori_hidden = 4;
        cfg.g1_width = cfg.d1_width = cfg.g2_width = cfg.d2_width = 2;
        cfg.text_cond_dim = 2;
        cfg.m = 2;
        cfg.steps_stage1 = cfg.steps_stage2 = 0;
        cfg.log_every = 0;
        stage1 = cmd::train_stage1(manifest, cfg, dir / "ckpt").checkpoint;
        stage2 = cmd::train_stage2(manifest, cfg, dir / "ckpt", stage1).checkpoint;
    }
    ~World() { fs::remove_all(dir); }

    fs::path image() const { return load_manifest(manifest).front().image; }
    ServiceConfig service_config() const {
        ServiceConfig c;
        c.stage1 = stage1;
        c.stage2 = stage2;
        return c;
    }
};

World& world() {
    static World w;
    return w;
}

int run_cli(const std::string& args, const fs::path& out_file = "/dev/null") {
    const std::string cmd = std::string(TGPS_CLI_PATH) + " " + args + " > " + out_file.string() + " 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string request(const std::string& caption, const fs::path& image) {
    const auto bytes = read_file_bytes(image);
    return nlohmann::json{{"caption", caption}, {"image", base64_encode(bytes)}}.dump();
}

}  // namespace

TEST(Cli, HelpListsEveryConfigKeyWithDefault) {
    const fs::path out = world().dir / "help.txt";
    ASSERT_EQ(run_cli("--help", out), 0);
    const std::string help = slurp(out);
    const nlohmann::json defaults = TrainConfig{};
    for (const auto& [key, value] : defaults.items()) {
        const auto at = help.find("--" + key + " ");
        ASSERT_NE(at, std::string::npos) << key;
        const std::string line = help.substr(at, help.find('\n', at) - at);
        EXPECT_NE(line.find('['), std::string::npos) << line;
    }
    EXPECT_NE(help.find("[10]"), std::string::npos);  // lambda1, gamma1
}

TEST(Cli, ExitCodes) {
    const World& w = world();
    EXPECT_EQ(run_cli(""), 1);                                   // no subcommand
    EXPECT_EQ(run_cli("fixture --bogus 1 --out /tmp/x"), 1);     // unknown flag
    EXPECT_EQ(run_cli("cluster-poses --manifest " + w.manifest.string() + " --L 7 --out " + (w.dir / "b.json").string()), 1);
    EXPECT_EQ(run_cli("cluster-poses --manifest " + (w.dir / "missing.jsonl").string() + " --out x"), 1);
    std::ofstream(w.dir / "blocker") << "x";
    EXPECT_EQ(run_cli("fixture --out " + (w.dir / "blocker" / "sub").string()), 2);
    EXPECT_EQ(run_cli("fixture --identities 1 --per-identity 1 --out " + (w.dir / "cli_fx").string()), 0);
    EXPECT_TRUE(fs::exists(w.dir / "cli_fx" / "manifest.jsonl"));
}

TEST(Cli, ClusterPosesWithOneClusterIsTheMean) {
    const World& w = world();
    const fs::path out = w.dir / "k1.json";
    ASSERT_EQ(run_cli("cluster-poses --K 1 --manifest " + w.manifest.string() + " --out " + out.string()), 0);
    const BasicPoseSet b = basic_poses_from_json(cmd::read_json(out));
    ASSERT_EQ(b.K(), 1);
    const auto samples = load_manifest(w.manifest);
    std::vector<double> mean;
    for (const auto& s : samples) {
        const auto v = normalize_pose(s.pose);
        mean.resize(v.size(), 0.0);
        for (std::size_t i = 0; i < v.size(); ++i) mean[i] += v[i] / samples.size();
    }
    const auto got = normalize_pose(b.poses[0]);
    ASSERT_EQ(got.size(), mean.size());
    for (std::size_t i = 0; i < mean.size(); ++i) EXPECT_NEAR(got[i], mean[i], 1e-9) << i;
}

TEST(Cli, InferIsDeterministic) {
    const World& w = world();
    const std::string args = "infer --image " + w.image().string() + " --caption \"a man in a red shirt, facing left\"" +
                             " --stage1 " + w.stage1.string() + " --stage2 " + w.stage2.string() + " --out ";
    ASSERT_EQ(run_cli(args + (w.dir / "i1").string()), 0);
    ASSERT_EQ(run_cli(args + (w.dir / "i2").string()), 0);
    for (const char* f : {"image.png", "pose.png", "summary.json"})
        EXPECT_EQ(slurp(w.dir / "i1" / f), slurp(w.dir / "i2" / f)) << f;
    const auto summary = cmd::read_json(w.dir / "i1" / "summary.json");
    EXPECT_GE(summary["orientation"].get<int>(), 0);
    EXPECT_LT(summary["orientation"].get<int>(), 8);
    double total = 0;
    for (double p : summary["orientation_probs"]) total += p;
    EXPECT_NEAR(total, 1.0, 1e-9);
    const RgbImage img = decode_png(read_file_bytes(w.dir / "i1" / "image.png"));
    EXPECT_EQ(img.height, 128);
    EXPECT_EQ(img.width, 64);
}

TEST(Cli, EvalReportsEveryMetric) {
    const World& w = world();
    const auto r = cmd::eval(w.manifest, w.stage1, w.stage2, {"vqa", "ssim", "is"}, 3);
    EXPECT_EQ(r["per_image"].size(), 16u);  // 8 identities x 2 ordered pairs
    EXPECT_GE(r["vqa_score"].get<double>(), 0.0);
    EXPECT_LE(r["vqa_score"].get<double>(), 1.0);
    EXPECT_GE(r["is_mean"].get<double>(), 1.0);
    EXPECT_THROW(cmd::eval(w.manifest, w.stage1, w.stage2, {"fid"}, 3), ValidationError);
}

TEST(Service, UnavailableUntilLoaded) {
    EditService s(2);
    EXPECT_EQ(s.health().status, 503);
    EXPECT_EQ(s.basic_poses().status, 503);
    EXPECT_EQ(s.synthesize("{}").status, 503);
}

TEST(Service, ValidationStatuses) {
    const World& w = world();
    EditService s(2);
    s.load(w.service_config());
    auto field = [](const HttpReply& r) { return r.body["field"].get<std::string>(); };

    HttpReply r = s.synthesize("not json");
    EXPECT_EQ(r.status, 400);
    r = s.synthesize(R"({"image":"aGk="})");
    EXPECT_EQ(r.status, 400);
    EXPECT_EQ(field(r), "caption");
    r = s.synthesize(request("   ", w.image()));
    EXPECT_EQ(r.status, 400);
    EXPECT_EQ(field(r), "caption");
    r = s.synthesize(R"({"caption":"a man","image":"@@not base64@@"})");
    EXPECT_EQ(r.status, 400);
    EXPECT_EQ(field(r), "image");
    r = s.synthesize(R"({"caption":"a man","image":"aGVsbG8="})");  // valid base64, not a PNG
    EXPECT_EQ(r.status, 400);
    EXPECT_EQ(field(r), "image");
    r = s.synthesize(request("zyzzyva quokka", w.image()));
    EXPECT_EQ(r.status, 422);
    EXPECT_EQ(field(r), "caption");
}

TEST(Service, SynthesizeDeterministicAndVersioned) {
    const World& w = world();
    EditService s(2);
    s.load(w.service_config());
    const std::string body = request("a woman in a blue shirt, facing right", w.image());
    const HttpReply a = s.synthesize(body), b = s.synthesize(body);
    ASSERT_EQ(a.status, 200) << a.body.dump();
    EXPECT_EQ(a.body["image"], b.body["image"]);
    EXPECT_EQ(a.body["orientation"], b.body["orientation"]);
    EXPECT_EQ(a.body["pose"].size(), 18u);
    const RgbImage img = decode_png(base64_decode(a.body["image"].get<std::string>()));
    EXPECT_EQ(img.height, 128);
    EXPECT_EQ(img.width, 64);

    const std::string v1 = model_version(w.stage1), v2 = model_version(w.stage2);
    EXPECT_EQ(s.model_version(), sha256_hex(v1 + v2));
    EXPECT_EQ(s.model_version().size(), 64u);
    EXPECT_EQ(s.health().body["model_version"], s.model_version());

    const HttpReply no_pose = s.synthesize(
        nlohmann::json{{"caption", "a man"}, {"image", base64_encode(read_file_bytes(w.image()))}, {"options", {{"return_pose", false}}}}
            .dump());
    ASSERT_EQ(no_pose.status, 200);
    EXPECT_FALSE(no_pose.body.contains("pose"));
}

TEST(Service, BasicPosesDocument) {
    const World& w = world();
    EditService s(1);
    s.load(w.service_config());
    const HttpReply r = s.basic_poses();
    ASSERT_EQ(r.status, 200);
    EXPECT_EQ(r.body["K"], 8);
    EXPECT_EQ(r.body["poses"].size(), 8u);
    EXPECT_EQ(r.body["frame"], nlohmann::json({128, 64}));
    for (const auto& p : r.body["poses"]) EXPECT_EQ(p.size(), 18u);
}

TEST(Service, GateRefusesBeyondLimit) {
    AdmissionGate g(2);
    auto a = g.try_enter(), b = g.try_enter(), c = g.try_enter();
    EXPECT_TRUE(a);
    EXPECT_TRUE(b);
    EXPECT_FALSE(c);
    { auto moved = std::move(a); }
    EXPECT_EQ(g.in_flight(), 1);
    EXPECT_TRUE(g.try_enter());
    EXPECT_THROW(AdmissionGate(0), ConfigError);
}

TEST(Service, HttpEndpoints) {
    const World& w = world();
    EditService s(1);
    httplib::Server server;
    s.mount(server);
    const int port = server.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port, 0);
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    httplib::Client cli("127.0.0.1", port);

    auto health = cli.Get("/v1/health");
    ASSERT_TRUE(health);
    EXPECT_EQ(health->status, 503);
    const std::string body = request("a man in a green shirt", w.image());
    EXPECT_EQ(cli.Post("/v1/synthesize", body, "application/json")->status, 503);

    s.load(w.service_config());
    health = cli.Get("/v1/health");
    EXPECT_EQ(health->status, 200);
    EXPECT_EQ(nlohmann::json::parse(health->body)["model_version"], s.model_version());
    EXPECT_EQ(cli.Get("/v1/basic-poses")->status, 200);

    const auto a = cli.Post("/v1/synthesize", body, "application/json");
    const auto b = cli.Post("/v1/synthesize", body, "application/json");
    ASSERT_EQ(a->status, 200);
    EXPECT_EQ(nlohmann::json::parse(a->body)["image"], nlohmann::json::parse(b->body)["image"]);
    EXPECT_EQ(cli.Post("/v1/synthesize", "{", "application/json")->status, 400);

    {
        auto held = s.gate().try_enter();  // the only slot
        ASSERT_TRUE(held);
        const auto r = cli.Post("/v1/synthesize", body, "application/json");
        EXPECT_EQ(r->status, 429);
        EXPECT_EQ(nlohmann::json::parse(r->body)["field"], "concurrency");
    }
    EXPECT_EQ(cli.Post("/v1/synthesize", body, "application/json")->status, 200);

    server.stop();
    th.join();
}
