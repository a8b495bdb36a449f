#include "stepsep/subprocess.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <thread>

namespace stepsep {

namespace {

constexpr std::size_t kStderrTailLimit = 8192;

void ignore_sigpipe_once() {
    // Writing to a child that died mid-request must surface as EPIPE, not kill us.
    static std::once_flag once;
    std::call_once(once, [] { ::signal(SIGPIPE, SIG_IGN); });
}

int remaining_ms(ChildProcess::Deadline deadline) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    return static_cast<int>(std::clamp<long long>(left.count(), 0, 1 << 30));
}

std::string join(const std::vector<std::string>& argv) {
    std::string s;
    for (const auto& a : argv) {
        if (!s.empty()) s += ' ';
        s += a;
    }
    return s;
}

}  // namespace

const char* to_string(ExternalProcessError::Kind kind) noexcept {
    switch (kind) {
        case ExternalProcessError::Kind::spawn_failed: return "spawn_failed";
        case ExternalProcessError::Kind::crashed: return "crashed";
        case ExternalProcessError::Kind::malformed_reply: return "malformed_reply";
        case ExternalProcessError::Kind::timeout: return "timeout";
    }
    return "unknown";
}

ChildProcess::ChildProcess(const std::vector<std::string>& argv) : command_(join(argv)) {
    if (argv.empty()) throw ExternalProcessError(ExternalProcessError::Kind::spawn_failed, "empty command");
    ignore_sigpipe_once();

    int in_pipe[2], out_pipe[2], err_pipe[2], exec_pipe[2];
    if (::pipe2(in_pipe, O_CLOEXEC) != 0 || ::pipe2(out_pipe, O_CLOEXEC) != 0 || ::pipe2(err_pipe, O_CLOEXEC) != 0 ||
        ::pipe2(exec_pipe, O_CLOEXEC) != 0)
        throw ExternalProcessError(ExternalProcessError::Kind::spawn_failed,
                                   command_ + ": pipe() failed: " + std::strerror(errno));

    std::vector<char*> args;
    for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
    args.push_back(nullptr);

    pid_ = ::fork();
    if (pid_ < 0)
        throw ExternalProcessError(ExternalProcessError::Kind::spawn_failed,
                                   command_ + ": fork() failed: " + std::strerror(errno));
    if (pid_ == 0) {
        ::dup2(in_pipe[0], STDIN_FILENO);
        ::dup2(out_pipe[1], STDOUT_FILENO);
        ::dup2(err_pipe[1], STDERR_FILENO);
        ::execvp(args[0], args.data());
        // exec_pipe closes on a successful exec; otherwise report errno through it.
        const int code = errno;
        (void)!::write(exec_pipe[1], &code, sizeof code);
        ::_exit(127);
    }

    ::close(exec_pipe[1]);
    int exec_errno = 0;
    ssize_t got;
    do {
        got = ::read(exec_pipe[0], &exec_errno, sizeof exec_errno);
    } while (got < 0 && errno == EINTR);
    ::close(exec_pipe[0]);
    if (got == static_cast<ssize_t>(sizeof exec_errno)) {
        for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1], err_pipe[0], err_pipe[1]}) ::close(fd);
        int status = 0;
        ::waitpid(pid_, &status, 0);
        pid_ = -1;
        throw ExternalProcessError(ExternalProcessError::Kind::spawn_failed,
                                   command_ + ": cannot execute: " + std::strerror(exec_errno));
    }

    ::close(in_pipe[0]);
    ::close(out_pipe[1]);
    ::close(err_pipe[1]);
    stdin_fd_ = in_pipe[1];
    stdout_fd_ = out_pipe[0];
    stderr_fd_ = err_pipe[0];
    for (int fd : {stdin_fd_, stdout_fd_, stderr_fd_}) ::fcntl(fd, F_SETFL, ::fcntl(fd, F_GETFL) | O_NONBLOCK);
}

ChildProcess::~ChildProcess() {
    if (stdin_fd_ >= 0) ::close(stdin_fd_);
    if (pid_ > 0) {
        // Closing stdin asks the child to exit; give it a moment before forcing it.
        const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(2);
        int status = 0;
        while (::waitpid(pid_, &status, WNOHANG) == 0) {
            if (std::chrono::steady_clock::now() > deadline) {
                ::kill(pid_, SIGKILL);
                ::waitpid(pid_, &status, 0);
                break;
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(2));
        }
    }
    if (stdout_fd_ >= 0) ::close(stdout_fd_);
    if (stderr_fd_ >= 0) ::close(stderr_fd_);
}

void ChildProcess::drain_stderr() {
    if (stderr_fd_ < 0) return;
    char buf[4096];
    for (;;) {
        const ssize_t n = ::read(stderr_fd_, buf, sizeof buf);
        if (n > 0) {
            stderr_tail_.append(buf, static_cast<std::size_t>(n));
            if (stderr_tail_.size() > kStderrTailLimit)
                stderr_tail_.erase(0, stderr_tail_.size() - kStderrTailLimit);
            continue;
        }
        if (n == 0) {
            ::close(stderr_fd_);
            stderr_fd_ = -1;
        }
        return;
    }
}

void ChildProcess::reap() {
    if (pid_ <= 0) return;
    // The child closed stdout; collect its remaining diagnostics and exit code.
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(2);
    int status = 0;
    while (::waitpid(pid_, &status, WNOHANG) == 0) {
        drain_stderr();
        if (std::chrono::steady_clock::now() > deadline) {
            ::kill(pid_, SIGKILL);
            ::waitpid(pid_, &status, 0);
            break;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(1));
    }
    drain_stderr();
    exit_status_ = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
    pid_ = -1;
}

void ChildProcess::fail(ExternalProcessError::Kind kind, const std::string& what) {
    broken_ = true;
    if (kind == ExternalProcessError::Kind::timeout && pid_ > 0) ::kill(pid_, SIGKILL);
    if (kind != ExternalProcessError::Kind::malformed_reply) reap();
    else drain_stderr();
    std::string message = command_ + ": " + what;
    if (exit_status_ >= 0) message += " (exit status " + std::to_string(exit_status_) + ")";
    if (!stderr_tail_.empty()) message += "\nchild stderr:\n" + stderr_tail_;
    throw ExternalProcessError(kind, message);
}

void ChildProcess::pump(Deadline deadline, bool want_stdout) {
    pollfd fds[3];
    nfds_t count = 0;
    const int write_slot = want_stdout ? -1 : 0;
    if (!want_stdout) fds[count++] = {stdin_fd_, POLLOUT, 0};
    const nfds_t out_slot = count;
    fds[count++] = {stdout_fd_, POLLIN, 0};
    const nfds_t err_slot = count;
    if (stderr_fd_ >= 0) fds[count++] = {stderr_fd_, POLLIN, 0};

    const int rc = ::poll(fds, count, remaining_ms(deadline));
    if (rc < 0) {
        if (errno == EINTR) return;
        fail(ExternalProcessError::Kind::crashed, std::string("poll failed: ") + std::strerror(errno));
    }
    if (rc == 0) fail(ExternalProcessError::Kind::timeout, "timed out waiting for the child");

    if (stderr_fd_ >= 0 && err_slot < count && (fds[err_slot].revents & (POLLIN | POLLHUP))) drain_stderr();
    if (fds[out_slot].revents & (POLLIN | POLLHUP | POLLERR)) {
        unsigned char buf[65536];
        const ssize_t n = ::read(stdout_fd_, buf, sizeof buf);
        if (n > 0) pending_.insert(pending_.end(), buf, buf + n);
        else if (n == 0) fail(ExternalProcessError::Kind::crashed, "child exited or closed its output");
    }
    if (write_slot == 0 && (fds[0].revents & (POLLERR | POLLHUP)))
        fail(ExternalProcessError::Kind::crashed, "child closed its input");
}

void ChildProcess::write_all(std::span<const unsigned char> bytes, Deadline deadline) {
    if (broken_) fail(ExternalProcessError::Kind::crashed, "channel already broken");
    std::size_t written = 0;
    while (written < bytes.size()) {
        const ssize_t n = ::write(stdin_fd_, bytes.data() + written, bytes.size() - written);
        if (n > 0) {
            written += static_cast<std::size_t>(n);
            continue;
        }
        if (n < 0 && errno == EPIPE) fail(ExternalProcessError::Kind::crashed, "child closed its input");
        if (n < 0 && errno != EAGAIN && errno != EINTR)
            fail(ExternalProcessError::Kind::crashed, std::string("write failed: ") + std::strerror(errno));
        // Pipe full: keep draining the child's output so it cannot block on us.
        pump(deadline, false);
    }
}

std::string ChildProcess::read_line(Deadline deadline, std::size_t max_length) {
    if (broken_) fail(ExternalProcessError::Kind::crashed, "channel already broken");
    for (;;) {
        auto nl = std::find(pending_.begin(), pending_.end(), static_cast<unsigned char>('\n'));
        if (nl != pending_.end()) {
            std::string line(pending_.begin(), nl);
            pending_.erase(pending_.begin(), nl + 1);
            return line;
        }
        if (pending_.size() > max_length) fail(ExternalProcessError::Kind::malformed_reply, "header line too long");
        pump(deadline, true);
    }
}

std::vector<unsigned char> ChildProcess::read_exact(std::size_t count, Deadline deadline) {
    if (broken_) fail(ExternalProcessError::Kind::crashed, "channel already broken");
    while (pending_.size() < count) pump(deadline, true);
    std::vector<unsigned char> out(pending_.begin(), pending_.begin() + static_cast<std::ptrdiff_t>(count));
    pending_.erase(pending_.begin(), pending_.begin() + static_cast<std::ptrdiff_t>(count));
    return out;
}

// ---------------------------------------------------------------------------

ProcessPool::ProcessPool(std::vector<std::string> argv, std::size_t max_children)
    : argv_(std::move(argv)), max_children_(std::max<std::size_t>(1, max_children)) {}

ProcessPool::Lease::~Lease() {
    if (!pool_ || !child_) return;
    if (std::uncaught_exceptions() > exceptions_) child_->poison();
    pool_->give_back(std::move(child_));
}

ProcessPool::Lease ProcessPool::lease() {
    std::unique_lock lock(mutex_);
    available_.wait(lock, [&] { return !idle_.empty() || live_ < max_children_; });
    if (!idle_.empty()) {
        auto child = std::move(idle_.back());
        idle_.pop_back();
        return Lease(this, std::move(child));
    }
    ++live_;
    lock.unlock();
    try {
        return Lease(this, std::make_unique<ChildProcess>(argv_));
    } catch (...) {
        std::lock_guard relock(mutex_);
        --live_;
        available_.notify_one();
        throw;
    }
}

void ProcessPool::give_back(std::unique_ptr<ChildProcess> child) {
    std::unique_ptr<ChildProcess> discard;
    {
        std::lock_guard lock(mutex_);
        if (child->broken()) {
            discard = std::move(child);
            --live_;
        } else {
            idle_.push_back(std::move(child));
        }
    }
    available_.notify_one();
}

std::vector<std::string> split_command(const std::string& command) {
    std::vector<std::string> out;
    std::string current;
    bool in_token = false;
    char quote = 0;
    for (char ch : command) {
        if (quote) {
            if (ch == quote) quote = 0;
            else current += ch;
        } else if (ch == '\'' || ch == '"') {
            quote = ch;
            in_token = true;
        } else if (ch == ' ' || ch == '\t' || ch == '\n') {
            if (in_token) out.push_back(std::move(current));
            current.clear();
            in_token = false;
        } else {
            current += ch;
            in_token = true;
        }
    }
    if (quote) throw std::invalid_argument("unterminated quote in command: " + command);
    if (in_token) out.push_back(std::move(current));
    return out;
}

std::vector<unsigned char> encode_interleaved_f32(const AudioBuffer& buffer) {
    std::vector<unsigned char> out(buffer.size() * sizeof(float));
    unsigned char* p = out.data();
    for (std::size_t i = 0; i < buffer.frames(); ++i) {
        for (std::size_t c = 0; c < buffer.channels(); ++c) {
            const float v = static_cast<float>(buffer.at(c, i));
            std::memcpy(p, &v, sizeof v);
            p += sizeof v;
        }
    }
    return out;
}

AudioBuffer decode_interleaved_f32(std::span<const unsigned char> bytes, const WireHeader& header) {
    if (bytes.size() != header.channels * header.num_samples * sizeof(float))
        throw ExternalProcessError(ExternalProcessError::Kind::malformed_reply, "payload size does not match header");
    AudioBuffer out(header.channels, header.num_samples, header.sample_rate);
    const unsigned char* p = bytes.data();
    for (std::size_t i = 0; i < header.num_samples; ++i) {
        for (std::size_t c = 0; c < header.channels; ++c) {
            float v;
            std::memcpy(&v, p, sizeof v);
            p += sizeof v;
            out.at(c, i) = static_cast<double>(v);
        }
    }
    return out;
}

}  // namespace stepsep
