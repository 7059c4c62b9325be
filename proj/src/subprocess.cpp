#include "cribwatch/subprocess.hpp"

#include <csignal>
#include <cstring>

#include <sys/wait.h>
#include <unistd.h>

#include "cribwatch/util.hpp"

namespace cribwatch {

Subprocess::Subprocess(const std::string& command, const std::vector<std::string>& args) {
    int in_pipe[2];  // parent -> child
    int out_pipe[2]; // child -> parent
    if (pipe(in_pipe) != 0 || pipe(out_pipe) != 0) {
        throw Error(errc::backend_failure, "pipe() failed: " + std::string(strerror(errno)));
    }

    pid_ = fork();
    if (pid_ < 0) {
        throw Error(errc::backend_failure, "fork() failed: " + std::string(strerror(errno)));
    }
    if (pid_ == 0) {
        dup2(in_pipe[0], STDIN_FILENO);
        dup2(out_pipe[1], STDOUT_FILENO);
        close(in_pipe[0]);
        close(in_pipe[1]);
        close(out_pipe[0]);
        close(out_pipe[1]);
        std::vector<char*> argv;
        argv.push_back(const_cast<char*>(command.c_str()));
        for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
        argv.push_back(nullptr);
        execvp(command.c_str(), argv.data());
        _exit(127);
    }

    close(in_pipe[0]);
    close(out_pipe[1]);
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];
}

Subprocess::~Subprocess() {
    if (to_child_ >= 0) close(to_child_);
    if (from_child_ >= 0) close(from_child_);
    if (pid_ > 0) {
        int status = 0;
        // Give the child a moment to exit on EOF, then escalate.
        for (int i = 0; i < 50; ++i) {
            if (waitpid(pid_, &status, WNOHANG) == pid_) return;
            usleep(10 * 1000);
        }
        kill(pid_, SIGKILL);
        waitpid(pid_, &status, 0);
    }
}

bool Subprocess::alive() const {
    if (pid_ <= 0) return false;
    int status = 0;
    return waitpid(pid_, &status, WNOHANG) == 0;
}

void Subprocess::write_line(const std::string& line) {
    std::string data = line;
    data.push_back('\n');
    std::size_t off = 0;
    while (off < data.size()) {
        ssize_t n = write(to_child_, data.data() + off, data.size() - off);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw Error(errc::backend_failure, "write to child failed: " + std::string(strerror(errno)));
        }
        off += static_cast<std::size_t>(n);
    }
}

std::string Subprocess::read_line() {
    for (;;) {
        auto nl = buffer_.find('\n');
        if (nl != std::string::npos) {
            std::string line = buffer_.substr(0, nl);
            buffer_.erase(0, nl + 1);
            return line;
        }
        char chunk[4096];
        ssize_t n = read(from_child_, chunk, sizeof(chunk));
        if (n < 0) {
            if (errno == EINTR) continue;
            throw Error(errc::backend_failure, "read from child failed: " + std::string(strerror(errno)));
        }
        if (n == 0) throw Error(errc::backend_failure, "child closed its output stream");
        buffer_.append(chunk, static_cast<std::size_t>(n));
    }
}

} // namespace cribwatch
