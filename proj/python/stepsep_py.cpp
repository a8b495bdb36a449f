#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "stepsep/cli.hpp"
#include "stepsep/metrics.hpp"
#include "stepsep/refine.hpp"
#include "stepsep/separators.hpp"
#include "stepsep/subprocess.hpp"
#include "stepsep/theory.hpp"

namespace py = pybind11;
using namespace stepsep;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

/// Accepts (frames,) or (channels, frames).
AudioBuffer to_buffer(const Array& a, unsigned sample_rate) {
    if (a.ndim() == 1) {
        AudioBuffer b(1, static_cast<std::size_t>(a.shape(0)), sample_rate);
        std::copy(a.data(), a.data() + a.size(), b.samples().begin());
        return b;
    }
    if (a.ndim() != 2) throw py::value_error("audio must be a 1-D or (channels, frames) array");
    AudioBuffer b(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)), sample_rate);
    std::copy(a.data(), a.data() + a.size(), b.samples().begin());
    return b;
}

Array to_array(const AudioBuffer& b) {
    Array out({static_cast<py::ssize_t>(b.channels()), static_cast<py::ssize_t>(b.frames())});
    std::copy(b.samples().begin(), b.samples().end(), out.mutable_data());
    return out;
}

py::object to_python(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

std::optional<double> score_value(const MetricScore& s) {
    if (!s.usable()) return std::nullopt;
    return s.value;
}

MixtureProblem make_problem(const Array& mixture, unsigned sr, const std::optional<Array>& reference,
                            const std::optional<Array>& noise) {
    MixtureProblem p;
    p.mixture = to_buffer(mixture, sr);
    if (reference) p.reference = to_buffer(*reference, sr);
    if (noise) p.noise = to_buffer(*noise, sr);
    p.label = "python";
    p.validate();
    return p;
}

}  // namespace

PYBIND11_MODULE(_stepsep, m) {
    m.doc() = "Multi-step inference for one-step audio separation models";

    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<MetricError>(m, "MetricError", PyExc_ValueError);
    py::register_exception<RefinementError>(m, "RefinementError", PyExc_RuntimeError);
    py::register_exception<ExternalProcessError>(m, "ExternalProcessError", PyExc_RuntimeError);
    py::register_exception<AudioIoError>(m, "AudioIoError", PyExc_OSError);

    m.def("si_snr", [](const Array& ref, const Array& est) { return score_value(si_snr(to_buffer(ref, 1), to_buffer(est, 1))); },
          py::arg("reference"), py::arg("estimate"));
    m.def("sdr", [](const Array& ref, const Array& est) { return score_value(sdr(to_buffer(ref, 1), to_buffer(est, 1))); },
          py::arg("reference"), py::arg("estimate"));
    m.def("neg_mse", [](const Array& ref, const Array& est) { return neg_mse(to_buffer(ref, 1), to_buffer(est, 1)).value; },
          py::arg("reference"), py::arg("estimate"));
    m.def(
        "search_sdr",
        [](const Array& ref, const Array& est, unsigned sr) {
            return score_value(search_sdr(to_buffer(ref, sr), to_buffer(est, sr)));
        },
        py::arg("reference"), py::arg("estimate"), py::arg("sample_rate"));
    m.def("search_sdr_chunks", &search_sdr_chunks, py::arg("frames"), py::arg("sample_rate"),
          py::arg("chunk_seconds") = 6.0, py::arg("overlap") = 0.5);
    m.def(
        "csdr",
        [](const std::vector<std::pair<Array, Array>>& songs, unsigned sr, double chunk_seconds) {
            std::vector<SongPair> pairs;
            for (const auto& [r, e] : songs) pairs.push_back({to_buffer(r, sr), to_buffer(e, sr)});
            return csdr_report(pairs, chunk_seconds).value;
        },
        py::arg("songs"), py::arg("sample_rate"), py::arg("chunk_seconds") = 1.0);
    m.def("usdr", [](const std::vector<double>& v) { return usdr(v); }, py::arg("per_song_sdrs"));

    py::class_<SeparationModel, std::shared_ptr<SeparationModel>>(m, "Model")
        .def(
            "__call__",
            [](const SeparationModel& model, const Array& x, unsigned sr) { return to_array(model.evaluate(to_buffer(x, sr))); },
            py::arg("audio"), py::arg("sample_rate") = 16000)
        .def_property_readonly("name", [](const SeparationModel& model) { return model.descriptor().name; })
        .def_property_readonly("parameters", [](const SeparationModel& model) { return model.descriptor().parameters; });

    // Models are immutable once built; pybind11 needs a non-const holder.
    auto hold = [](ModelPtr p) { return std::const_pointer_cast<SeparationModel>(p); };
    m.def("identity_model", [hold] { return hold(identity_model()); });
    m.def(
        "contraction_model",
        [hold](const Array& target, double alpha, unsigned sr) { return hold(contraction_model({to_buffer(target, sr), alpha})); },
        py::arg("target"), py::arg("alpha"), py::arg("sample_rate") = 16000);
    m.def(
        "spectral_gate_model",
        [hold](const Array& noise, double over_subtraction, std::size_t frame_size, std::size_t hop_size, unsigned sr) {
            const StftConfig cfg{frame_size, hop_size, WindowKind::hann};
            return hold(spectral_gate_model(estimate_noise_profile(to_buffer(noise, sr), cfg), over_subtraction));
        },
        py::arg("noise"), py::arg("over_subtraction") = 1.0, py::arg("frame_size") = 1024, py::arg("hop_size") = 512,
        py::arg("sample_rate") = 16000);
    m.def(
        "oracle_irm_model", [hold](const Array& reference, unsigned sr) { return hold(oracle_irm_model(to_buffer(reference, sr))); },
        py::arg("reference"), py::arg("sample_rate") = 16000);
    m.def(
        "external_model",
        [hold](const std::string& command, double timeout_s, std::size_t children) {
            ExternalModelOptions opts;
            opts.timeout = std::chrono::milliseconds(static_cast<long long>(timeout_s * 1000));
            opts.max_children = children;
            return hold(external_model(split_command(command), opts));
        },
        py::arg("command"), py::arg("timeout_s") = 120.0, py::arg("children") = 1);

    m.def(
        "refine",
        [](const SeparationModel& model, const Array& mixture, unsigned sr, const std::optional<Array>& reference,
           std::size_t steps, std::size_t ratios, const std::string& search_metric,
           const std::vector<std::string>& eval_metrics, const std::string& grid) {
            RefinementConfig rc;
            rc.steps = steps;
            rc.num_ratios = ratios;
            rc.search_metric = MetricKind::parse(search_metric);
            for (const auto& e : eval_metrics) rc.eval_metrics.push_back(MetricKind::parse(e));
            if (grid != "inclusive" && grid != "open") throw py::value_error("grid must be 'inclusive' or 'open'");
            rc.grid = grid == "open" ? GridMode::open : GridMode::inclusive;
            rc.record_wall_time = false;
            const auto problem = make_problem(mixture, sr, reference, std::nullopt);
            RefinementResult result;
            {
                py::gil_scoped_release release;
                result = refine(model, problem, rc);
            }
            std::ostringstream trace;
            write_trace_jsonl(result.trace, trace);
            py::list steps_out;
            std::istringstream lines(trace.str());
            for (std::string line; std::getline(lines, line);) steps_out.append(to_python(nlohmann::json::parse(line)));
            return py::make_tuple(to_array(result.output), steps_out);
        },
        py::arg("model"), py::arg("mixture"), py::arg("sample_rate"), py::arg("reference") = py::none(),
        py::arg("steps") = 20, py::arg("ratios") = 10, py::arg("search_metric") = "si_snr",
        py::arg("eval_metrics") = std::vector<std::string>{}, py::arg("grid") = "inclusive");

    m.def("ratio_grid",
          [](std::size_t k, const std::string& grid) { return ratio_grid(k, grid == "open" ? GridMode::open : GridMode::inclusive); },
          py::arg("count"), py::arg("grid") = "inclusive");

    m.def(
        "simulate_error_bound",
        [](const Array& mixture, const Array& reference, double alpha, double epsilon_r, std::size_t trials,
           std::optional<double> lipschitz_model, std::uint64_t seed, unsigned sr) {
            BoundSimConfig cfg;
            cfg.problem = make_problem(mixture, sr, reference, std::nullopt);
            cfg.model = contraction_model({*cfg.problem.reference, alpha});
            cfg.epsilon_r = epsilon_r;
            cfg.trials = trials;
            cfg.lipschitz_model = lipschitz_model ? *lipschitz_model : alpha;
            cfg.seed = seed;
            return to_python(simulate_error_bound(cfg).to_json());
        },
        py::arg("mixture"), py::arg("reference"), py::arg("alpha"), py::arg("epsilon_r"), py::arg("trials") = 10000,
        py::arg("lipschitz_model") = py::none(), py::arg("seed") = 0, py::arg("sample_rate") = 16000);

    m.def(
        "ddbm_loss_equivalence",
        [](const std::vector<std::tuple<Array, Array, double>>& triples, double epsilon, double alpha, bool unit_weighting) {
            BridgeBatch batch;
            batch.epsilon = epsilon;
            for (const auto& [p, q, s] : triples) batch.samples.push_back({to_buffer(p, 1), to_buffer(q, 1), s});
            if (unit_weighting) batch.weighting = Weighting::custom("unit", [](double) { return 1.0; });
            return to_python(ddbm_loss_equivalence(batch, contraction_estimator(alpha)).to_json());
        },
        py::arg("triples"), py::arg("epsilon") = 1e-3, py::arg("alpha") = 0.5, py::arg("unit_weighting") = false);

    m.def(
        "bridge_score",
        [](const Array& x, const Array& p, const Array& q, double sigma, double epsilon) {
            return to_array(bridge_score(to_buffer(x, 1), {to_buffer(p, 1), to_buffer(q, 1), sigma}, epsilon));
        },
        py::arg("x"), py::arg("p"), py::arg("q"), py::arg("sigma"), py::arg("epsilon"));
    m.def(
        "bridge_point",
        [](const Array& p, const Array& q, double sigma) { return to_array(bridge_point({to_buffer(p, 1), to_buffer(q, 1), sigma})); },
        py::arg("p"), py::arg("q"), py::arg("sigma"));

    m.def(
        "load_wav",
        [](const std::string& path) {
            const auto b = load_wav(path);
            return py::make_tuple(to_array(b), b.sample_rate());
        },
        py::arg("path"));
    m.def(
        "save_wav",
        [](const std::string& path, const Array& audio, unsigned sr, bool pcm16) {
            save_wav(to_buffer(audio, sr), path, pcm16 ? WavEncoding::pcm16 : WavEncoding::float32);
        },
        py::arg("path"), py::arg("audio"), py::arg("sample_rate"), py::arg("pcm16") = false);

    m.def(
        "cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            int status;
            {
                py::gil_scoped_release release;
                status = cli::run(args, out, err);
            }
            return py::make_tuple(status, out.str(), err.str());
        },
        py::arg("args"));
}
