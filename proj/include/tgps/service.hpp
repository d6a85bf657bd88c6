#pragma once

/// \file service.hpp
/// \brief JSON-over-HTTP editing service: POST /v1/synthesize, GET /v1/basic-poses,
/// GET /v1/health, with a bounded admission gate and one JSON log line per request.

#include <openssl/evp.h>

#include <atomic>
#include <chrono>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>

#include "json.hpp"

#include "tgps/image_io.hpp"
#include "tgps/log.hpp"
#include "tgps/pipeline.hpp"

// After the Eigen-based headers: <resolv.h> defines a _res macro that Eigen uses as a name.
#include "httplib.h"

namespace tgps {

// ---------------------------------------------------------------- base64

inline std::string base64_encode(std::span<const std::uint8_t> bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

/// Strict standard-alphabet decoding; whitespace is ignored.
inline std::vector<std::uint8_t> base64_decode(std::string_view text) {
    std::string s;
    for (char c : text)
        if (!std::isspace(static_cast<unsigned char>(c))) s += c;
    if (s.size() % 4 != 0) throw FormatError("base64 length is not a multiple of 4");
    std::vector<std::uint8_t> out(s.size() / 4 * 3);
    const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(s.data()), static_cast<int>(s.size()));
    if (n < 0) throw FormatError("invalid base64");
    std::size_t pad = 0;
    if (!s.empty() && s.back() == '=') ++pad;
    if (s.size() > 1 && s[s.size() - 2] == '=') ++pad;
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

// ---------------------------------------------------------------- admission

/// At most `limit` concurrent holders; excess requests are refused, never queued.
class AdmissionGate {
public:
    explicit AdmissionGate(int limit) : limit_(limit) {
        if (limit < 1) throw ConfigError("max-concurrency must be >= 1");
    }

    class Ticket {
    public:
        Ticket() = default;
        explicit Ticket(AdmissionGate* g) : g_(g) {}
        Ticket(Ticket&& o) noexcept : g_(std::exchange(o.g_, nullptr)) {}
        Ticket& operator=(Ticket&& o) noexcept {
            release();
            g_ = std::exchange(o.g_, nullptr);
            return *this;
        }
        ~Ticket() { release(); }
        explicit operator bool() const { return g_ != nullptr; }

    private:
        void release() {
            if (g_) g_->in_flight_.fetch_sub(1);
            g_ = nullptr;
        }
        AdmissionGate* g_ = nullptr;
    };

    Ticket try_enter() {
        int cur = in_flight_.load();
        while (cur < limit_)
            if (in_flight_.compare_exchange_weak(cur, cur + 1)) return Ticket(this);
        return Ticket();
    }
    int in_flight() const { return in_flight_.load(); }

private:
    int limit_;
    std::atomic<int> in_flight_{0};
};

// ---------------------------------------------------------------- service

struct ServiceConfig {
    std::filesystem::path stage1, stage2;
    std::optional<std::filesystem::path> basics, vocab;
    int max_concurrency = 4;
};

struct HttpReply {
    int status = 200;
    nlohmann::json body;
};

class EditService {
public:
    explicit EditService(int max_concurrency) : gate_(max_concurrency) {}

    /// Loads both checkpoints (and optional basic-pose / vocabulary overrides).
    /// Until this returns, every model endpoint answers 503.
    void load(const ServiceConfig& c) {
        auto s1 = std::make_shared<Stage1Bundle>(load_stage1(c.stage1));
        auto s2 = std::make_shared<Stage2Bundle>(load_stage2(c.stage2));
        if (c.vocab) {
            const auto bytes = read_file_bytes(*c.vocab);
            const Vocab v = Vocab::from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
            if (!(v == s1->vocab) || !(v == s2->vocab))
                throw ConfigError("vocabulary file does not match the checkpoints' vocabulary");
        }
        if (c.basics) {
            const auto bytes = read_file_bytes(*c.basics);
            BasicPoseSet b = basic_poses_from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
            if (b.K() != s1->basics.K() || b.J() != s1->basics.J() || !(b.frame() == s1->basics.frame()))
                throw ConfigError("basic-pose file does not match the stage I checkpoint (K, J, frame)");
            s1->basics = std::move(b);
        }
        if (s1->basics.frame().height != s2->cfg.H || s1->basics.frame().width != s2->cfg.W)
            throw ConfigError("stage I and stage II frames differ");
        version_ = sha256_hex(s1->version + s2->version);
        s1_ = std::move(s1);
        s2_ = std::move(s2);
        ready_.store(true);
    }

    bool ready() const { return ready_.load(); }
    const std::string& model_version() const { return version_; }
    AdmissionGate& gate() { return gate_; }

    HttpReply health() const {
        if (!ready()) return {503, {{"status", "loading"}, {"model_version", nullptr}}};
        return {200, {{"status", "ok"}, {"model_version", version_}}};
    }

    HttpReply basic_poses() const {
        if (!ready()) return unavailable();
        return {200, basic_poses_to_json(s1_->basics)};
    }

    HttpReply synthesize(const std::string& body) const {
        if (!ready()) return unavailable();
        const auto t0 = std::chrono::steady_clock::now();
        nlohmann::json req;
        try {
            req = nlohmann::json::parse(body);
        } catch (const nlohmann::json::exception&) {
            return bad(400, "body", "request body is not valid JSON");
        }
        if (!req.is_object()) return bad(400, "body", "request body must be a JSON object");
        if (!req.contains("caption") || !req["caption"].is_string()) return bad(400, "caption", "caption must be a string");
        const std::string caption = req["caption"].get<std::string>();
        if (split_words(caption).empty()) return bad(400, "caption", "caption is empty");
        if (!req.contains("image") || !req["image"].is_string()) return bad(400, "image", "image must be a base64 PNG string");
        bool return_pose = true;
        if (req.contains("options")) {
            const auto& o = req["options"];
            if (!o.is_object()) return bad(400, "options", "options must be an object");
            if (o.contains("return_pose")) {
                if (!o["return_pose"].is_boolean()) return bad(400, "options", "return_pose must be a boolean");
                return_pose = o["return_pose"].get<bool>();
            }
        }
        ImageTensor x;
        try {
            const Frame f = s1_->basics.frame();
            x = resize_image(base64_decode(req["image"].get<std::string>()), f.height, f.width);
        } catch (const Error& e) {
            return bad(400, "image", std::string("image does not decode: ") + e.what());
        }
        Synthesis s;
        try {
            s = tgps::synthesize(x, caption, *s1_, *s2_);
        } catch (const VocabularyError& e) {
            return bad(422, "caption", e.what());
        }
        nlohmann::json out{{"image", base64_encode(encode_png(s.image))},
                           {"orientation", s.orientation},
                           {"orientation_phrase", s1_->phrasebook.at(static_cast<std::size_t>(s.orientation))}};
        if (return_pose) out["pose"] = pose_to_json(s.pose);
        out["latency_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        return {200, out};
    }

    /// Registers the three endpoints on `server`.
    void mount(httplib::Server& server) {
        server.Get("/v1/health", [this](const httplib::Request& rq, httplib::Response& rs) { respond(rq, rs, health()); });
        server.Get("/v1/basic-poses", [this](const httplib::Request& rq, httplib::Response& rs) {
            respond(rq, rs, basic_poses());
        });
        server.Post("/v1/synthesize", [this](const httplib::Request& rq, httplib::Response& rs) {
            auto ticket = gate_.try_enter();
            if (!ticket) return respond(rq, rs, bad(429, "concurrency", "too many concurrent requests"));
            HttpReply r;
            try {
                r = synthesize(rq.body);
            } catch (const std::exception& e) {
                r = bad(500, "internal", e.what());
            }
            respond(rq, rs, r);
        });
    }

private:
    static HttpReply unavailable() { return {503, {{"error", "model not loaded"}, {"field", nullptr}}}; }
    static HttpReply bad(int status, const std::string& field, const std::string& msg) {
        return {status, {{"error", msg}, {"field", field}}};
    }

    static void respond(const httplib::Request& rq, httplib::Response& rs, const HttpReply& r) {
        rs.status = r.status;
        rs.set_content(r.body.dump(), "application/json");
        nlohmann::json f{{"method", rq.method}, {"path", rq.path}, {"status", r.status}};
        if (r.body.contains("latency_ms")) f["latency_ms"] = r.body["latency_ms"];
        log_event(r.status < 400 ? "info" : "warn", "request", f);
    }

    AdmissionGate gate_;
    std::atomic<bool> ready_{false};
    std::shared_ptr<const Stage1Bundle> s1_;
    std::shared_ptr<const Stage2Bundle> s2_;
    std::string version_;
};

}  // namespace tgps
