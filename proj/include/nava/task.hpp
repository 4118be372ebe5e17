#pragma once

#include <string>

#include "nava/errors.hpp"

namespace nava {

enum class Task : uint8_t { T2AV, T2A, T2V, TI2AV };

inline const char* task_name(Task t) {
    switch (t) {
        case Task::T2AV: return "t2av";
        case Task::T2A: return "t2a";
        case Task::T2V: return "t2v";
        case Task::TI2AV: return "ti2av";
    }
    return "?";
}

inline Task task_from_name(const std::string& s) {
    if (s == "t2av") return Task::T2AV;
    if (s == "t2a") return Task::T2A;
    if (s == "t2v") return Task::T2V;
    if (s == "ti2av") return Task::TI2AV;
    throw ConfigError("unknown task: " + s);
}

inline bool task_has_audio(Task t) { return t != Task::T2V; }
inline bool task_has_video(Task t) { return t != Task::T2A; }

}  // namespace nava
