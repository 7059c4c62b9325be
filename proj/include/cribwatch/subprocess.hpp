#pragma once

#include <string>
#include <vector>

namespace cribwatch {

// Minimal line-oriented child process: stdin/stdout piped, stderr inherited.
// Used by the external classifier backend to talk to a model runner.
class Subprocess {
public:
    Subprocess(const std::string& command, const std::vector<std::string>& args);
    ~Subprocess();
    Subprocess(const Subprocess&) = delete;
    Subprocess& operator=(const Subprocess&) = delete;

    void write_line(const std::string& line);
    // Blocks for the next newline-terminated line; throws on EOF.
    std::string read_line();
    bool alive() const;

private:
    int pid_ = -1;
    int to_child_ = -1;
    int from_child_ = -1;
    std::string buffer_;
};

} // namespace cribwatch
