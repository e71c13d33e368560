#pragma once

#include <chrono>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace ssmlm {

// Runtime contract failure. Subcommands catch this at the top level and turn
// it into a nonzero exit with the message on stderr.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <class... Args>
std::string strcat_msg(Args&&... args) {
    std::ostringstream os;
    (os << ... << std::forward<Args>(args));
    return os.str();
}

template <class... Args>
[[noreturn]] void fail(Args&&... args) {
    throw Error(strcat_msg(std::forward<Args>(args)...));
}

template <class... Args>
void check(bool cond, Args&&... args) {
    if (!cond) fail(std::forward<Args>(args)...);
}

struct Timer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    void reset() { t0 = std::chrono::steady_clock::now(); }
};

// Sets both the OpenMP and BLAS worker counts. n <= 0 leaves the defaults.
void set_num_threads(int n);
int max_threads();

} // namespace ssmlm
