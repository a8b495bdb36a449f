// Scripted peer for the external model and metric wire contract.
//
//   fixture_child identity | gain <g> | crash | malformed | wrong_shape | hang
//   fixture_child metric <score> | metric_mse
//
// Each request is one JSON header line followed by interleaved float32
// samples (two signals when the header lists "signals": [reference, estimate]).

#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

namespace {

bool read_line(std::string& line) {
    line.clear();
    char c;
    while (true) {
        const ssize_t n = ::read(0, &c, 1);
        if (n <= 0) return false;
        if (c == '\n') return true;
        line.push_back(c);
    }
}

bool read_floats(std::vector<float>& out, std::size_t count) {
    out.resize(count);
    auto* p = reinterpret_cast<char*>(out.data());
    std::size_t need = count * sizeof(float);
    while (need > 0) {
        const ssize_t n = ::read(0, p, need);
        if (n <= 0) return false;
        p += n;
        need -= static_cast<std::size_t>(n);
    }
    return true;
}

void write_bytes(const void* data, std::size_t size) {
    std::fwrite(data, 1, size, stdout);
}

}  // namespace

int main(int argc, char** argv) {
    const std::string mode = argc > 1 ? argv[1] : "identity";
    const double param = argc > 2 ? std::stod(argv[2]) : 0.0;

    std::string line;
    while (read_line(line)) {
        const auto header = nlohmann::json::parse(line);
        const std::size_t n = header.at("channels").get<std::size_t>() * header.at("num_samples").get<std::size_t>();
        const std::size_t signals = header.contains("signals") ? header["signals"].size() : 1;
        std::vector<std::vector<float>> payload(signals);
        for (auto& s : payload)
            if (!read_floats(s, n)) return 4;

        if (mode == "crash") {
            std::fprintf(stderr, "fixture: deliberate failure on request\n");
            return 3;
        }
        if (mode == "hang") {
            std::this_thread::sleep_for(std::chrono::seconds(60));
            return 0;
        }
        if (mode == "malformed") {
            std::fputs("this is not json\n", stdout);
        } else if (mode == "metric") {
            std::fputs((nlohmann::json{{"score", param}}.dump() + "\n").c_str(), stdout);
        } else if (mode == "metric_mse") {
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double d = double(payload[0][i]) - double(payload.back()[i]);
                acc += d * d;
            }
            std::fputs((nlohmann::json{{"score", n ? -acc / double(n) : 0.0}}.dump() + "\n").c_str(), stdout);
        } else {
            nlohmann::json reply = {{"sample_rate", header.at("sample_rate")},
                                    {"channels", header.at("channels")},
                                    {"num_samples", header.at("num_samples")}};
            std::vector<float> out = payload.front();
            if (mode == "gain")
                for (float& v : out) v = static_cast<float>(v * param);
            if (mode == "wrong_shape") {
                reply["num_samples"] = header.at("num_samples").get<std::size_t>() + 1;
                out.resize(out.size() + header.at("channels").get<std::size_t>(), 0.0f);
            }
            const std::string head = reply.dump() + "\n";
            write_bytes(head.data(), head.size());
            write_bytes(out.data(), out.size() * sizeof(float));
        }
        std::fflush(stdout);
    }
    return 0;
}
