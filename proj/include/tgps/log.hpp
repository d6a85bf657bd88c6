#pragma once

/// \file log.hpp
/// \brief Structured one-line JSON event log on stderr.

#include "json.hpp"

#include <atomic>
#include <iostream>
#include <mutex>
#include <string>

namespace tgps {

inline std::atomic<bool>& logging_enabled() {
    static std::atomic<bool> enabled{true};
    return enabled;
}

inline void log_event(const std::string& level, const std::string& event, nlohmann::json fields = nlohmann::json::object()) {
    if (!logging_enabled()) return;
    static std::mutex mu;
    fields["level"] = level;
    fields["event"] = event;
    std::lock_guard lock(mu);
    std::cerr << fields.dump() << '\n';
}

}  // namespace tgps
