#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "cvr/retrieval.hpp"
#include "cvr/toy.hpp"
#include "cvr/training.hpp"

namespace py = pybind11;
using namespace cvr;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(std::move(shape), std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray to_array(const Tensor& t) {
    FloatArray out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
    std::copy(t.vec().begin(), t.vec().end(), out.mutable_data());
    return out;
}

std::vector<FloatArray> to_arrays(const FeaturePyramid& p) {
    std::vector<FloatArray> out;
    for (const auto& l : p.levels) out.push_back(to_array(l));
    return out;
}

FeaturePyramid to_pyramid(const std::vector<FloatArray>& levels) {
    FeaturePyramid p;
    for (std::size_t s = 0; s < levels.size(); ++s) {
        p.levels.push_back(to_tensor(levels[s]));
        p.scales.push_back(std::pow(M_SQRT1_2, static_cast<double>(s)));
    }
    return p;
}

py::dict curve_dict(const std::vector<CurvePoint>& curve) {
    std::vector<double> loss, lr, r_h, p_has;
    for (const auto& c : curve) {
        loss.push_back(c.loss);
        lr.push_back(c.lr);
        r_h.push_back(c.r_h);
        p_has.push_back(c.p_has);
    }
    py::dict d;
    d["loss"] = loss;
    d["lr"] = lr;
    d["r_h"] = r_h;
    d["p_has"] = p_has;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Correlation-verification re-ranking core";
    py::register_exception<Error>(m, "CvrError", PyExc_ValueError);

    m.def("load_tensor", [](const std::string& path) { return to_array(load_tensor(path)); }, py::arg("path"));
    m.def("save_tensor", [](const std::string& path, const FloatArray& a) { save_tensor(path, to_tensor(a)); },
          py::arg("path"), py::arg("array"));
    m.def("resize_bilinear",
          [](const FloatArray& x, int64_t h, int64_t w) { return to_array(resize_bilinear(to_tensor(x), h, w)); },
          py::arg("x"), py::arg("height"), py::arg("width"));

    m.def("build_pyramid",
          [](const FloatArray& f, int num_scales) { return to_arrays(build_pyramid(FeatureMap(to_tensor(f)), num_scales)); },
          py::arg("feature_map"), py::arg("num_scales"));
    m.def("correlate", [](const FloatArray& q, const FloatArray& k) { return to_array(correlate(to_tensor(q), to_tensor(k))); },
          py::arg("query"), py::arg("key"), "ReLU'd cosine between every query and key position.");
    m.def("cross_scale_correlation",
          [](const std::vector<FloatArray>& q, const std::vector<FloatArray>& k) {
              return to_array(assemble_cross_scale(to_pyramid(q), to_pyramid(k)).volume);
          },
          py::arg("query_levels"), py::arg("key_levels"));
    m.def("conv4d_center_pivot",
          [](const FloatArray& x, const FloatArray& query_side, const FloatArray& key_side, const FloatArray& bias,
             int stride_q, int stride_k) {
              CenterPivotKernel k{to_tensor(query_side), to_tensor(key_side), to_tensor(bias)};
              return to_array(conv4d_center_pivot(to_tensor(x), k, stride_q, stride_k));
          },
          py::arg("x"), py::arg("query_side"), py::arg("key_side"), py::arg("bias"), py::arg("stride_q") = 1,
          py::arg("stride_k") = 1);

    m.def("quantize",
          [](const FloatArray& x) {
              const auto q = quantize(to_tensor(x));
              py::array_t<uint8_t> codes(std::vector<py::ssize_t>(q.shape.begin(), q.shape.end()));
              std::copy(q.codes.begin(), q.codes.end(), codes.mutable_data());
              return py::make_tuple(codes, q.scale, q.zero_point);
          },
          py::arg("x"), "Returns (codes, scale, zero_point).");
    m.def("dequantize",
          [](const py::array_t<uint8_t, py::array::c_style | py::array::forcecast>& codes, float scale, float zero_point) {
              QuantizedFeatureMap q;
              q.shape.assign(codes.shape(), codes.shape() + codes.ndim());
              q.codes.assign(codes.data(), codes.data() + codes.size());
              q.scale = scale;
              q.zero_point = zero_point;
              return to_array(dequantize(q));
          },
          py::arg("codes"), py::arg("scale"), py::arg("zero_point"));

    py::class_<EncoderConfig>(m, "EncoderConfig")
        .def(py::init<>())
        .def_readwrite("num_scales", &EncoderConfig::num_scales)
        .def_readwrite("in_channels", &EncoderConfig::in_channels)
        .def_readwrite("reduced_channels", &EncoderConfig::reduced_channels)
        .def_readwrite("block_channels", &EncoderConfig::block_channels)
        .def_readwrite("convs_per_block", &EncoderConfig::convs_per_block)
        .def_readwrite("mlp_hidden", &EncoderConfig::mlp_hidden);

    py::class_<EncoderWeights>(m, "EncoderWeights")
        .def_static("init", &EncoderWeights::init, py::arg("config"), py::arg("seed") = 1)
        .def_static("load", &load_weights, py::arg("path"))
        .def("save", [](const EncoderWeights& w, const std::string& path) { save_weights(path, w); }, py::arg("path"))
        .def_readonly("config", &EncoderWeights::config)
        .def("parameter_count", &EncoderWeights::parameter_count)
        .def("reduce",
             [](const EncoderWeights& w, const FloatArray& f) {
                 return to_arrays(reduce_scalewise(build_pyramid(FeatureMap(to_tensor(f)), w.config.num_scales), w.reducer));
             },
             py::arg("feature_map"), "Pyramid of a raw map passed through the scale-wise reducers.")
        .def("logits",
             [](const EncoderWeights& w, const FloatArray& volume) {
                 const auto z = encoder_forward(to_tensor(volume), w);
                 return py::make_tuple(z.z0, z.z1);
             },
             py::arg("volume"), "(non-match, match) logits of a cross-scale volume.")
        .def("verify", [](const EncoderWeights& w, const FloatArray& q, const FloatArray& k) {
                 return verify_pair(to_tensor(q), to_tensor(k), w);
             },
             py::arg("query_map"), py::arg("key_map"), "Match probability of two raw feature maps.");

    py::class_<ToyConfig>(m, "ToyConfig")
        .def(py::init<>())
        .def_readwrite("num_classes", &ToyConfig::num_classes)
        .def_readwrite("samples_per_class", &ToyConfig::samples_per_class)
        .def_readwrite("family_size", &ToyConfig::family_size)
        .def_readwrite("channels", &ToyConfig::channels)
        .def_readwrite("height", &ToyConfig::height)
        .def_readwrite("width", &ToyConfig::width)
        .def_readwrite("pattern_size", &ToyConfig::pattern_size)
        .def_readwrite("threshold", &ToyConfig::threshold)
        .def_readwrite("background", &ToyConfig::background)
        .def_readwrite("noise", &ToyConfig::noise)
        .def_readwrite("scale_prob", &ToyConfig::scale_prob)
        .def_readwrite("seed", &ToyConfig::seed);

    m.def("make_toy_dataset",
          [](const ToyConfig& cfg) {
              const auto ds = make_toy_dataset(cfg);
              std::vector<FloatArray> maps, descriptors;
              for (const auto& t : ds.maps) maps.push_back(to_array(t));
              for (const auto& t : ds.descriptors) descriptors.push_back(to_array(t));
              py::dict d;
              d["maps"] = maps;
              d["descriptors"] = descriptors;
              d["labels"] = ds.labels;
              return d;
          },
          py::arg("config"));

    m.def("train_toy",
          [](const std::string& config_text, int held_out) {
              std::istringstream is(config_text);
              const auto s = parse_train_config(is, "<python>");
              const auto split = make_toy_split(s.data, held_out);
              TrainResult r;
              {
                  py::gil_scoped_release release;
                  r = train_rerank_toy(split.train, s.train, s.schedule, s.encoder);
              }
              const auto ev = evaluate_pairs(split.held_out, r.weights, s.train.seed);
              py::dict metrics;
              metrics["accuracy"] = ev.accuracy;
              metrics["hard_accuracy"] = ev.hard_accuracy;
              metrics["mean_loss"] = ev.mean_loss;
              return py::make_tuple(r.weights, curve_dict(r.curve), metrics);
          },
          py::arg("config_text"), py::arg("held_out") = 4,
          "Trains on the toy set described by `key = value` text; returns (weights, curve, held-out metrics).");

    py::class_<RankedEntry>(m, "RankedEntry")
        .def_readonly("id", &RankedEntry::id)
        .def_readonly("s_g", &RankedEntry::s_g)
        .def_readonly("s_r", &RankedEntry::s_r)
        .def_readonly("s_fused", &RankedEntry::s_fused);
    py::class_<RankedList>(m, "RankedList")
        .def_readonly("query_id", &RankedList::query_id)
        .def_readonly("entries", &RankedList::entries)
        .def("ids", [](const RankedList& r) {
            std::vector<std::string> ids;
            for (const auto& e : r.entries) ids.push_back(e.id);
            return ids;
        });

    py::class_<FeatureStore>(m, "FeatureStore")
        .def(py::init<bool>(), py::arg("quantized") = true)
        .def_static("load", &FeatureStore::load, py::arg("directory"))
        .def("save", &FeatureStore::save, py::arg("directory"))
        .def("add",
             [](FeatureStore& s, const std::string& id, const FloatArray& descriptor, const std::vector<FloatArray>& levels) {
                 s.add(id, to_tensor(descriptor), to_pyramid(levels));
             },
             py::arg("id"), py::arg("descriptor"), py::arg("reduced_levels"))
        .def("__len__", &FeatureStore::size)
        .def("__contains__", &FeatureStore::contains)
        .def("ids", [](const FeatureStore& s) {
            std::vector<std::string> ids;
            for (const auto& e : s.entries()) ids.push_back(e.id);
            return ids;
        })
        .def("descriptor", [](const FeatureStore& s, const std::string& id) { return to_array(s.at(id).descriptor); })
        .def("pyramid", [](const FeatureStore& s, const std::string& id) { return to_arrays(s.pyramid(id)); })
        .def_property_readonly("quantized", &FeatureStore::quantized)
        .def("payload_bytes", &FeatureStore::pyramid_payload_bytes);

    m.def("ingest",
          [](const std::string& manifest, const EncoderWeights& w, bool quantized) {
              FeatureStore store(quantized);
              ingest(manifest, w, store);
              return store;
          },
          py::arg("manifest"), py::arg("weights"), py::arg("quantized") = true);
    m.def("global_rank",
          [](const std::string& query_id, const FloatArray& descriptor, const FeatureStore& store) {
              return global_rank(query_id, to_tensor(descriptor), store);
          },
          py::arg("query_id"), py::arg("descriptor"), py::arg("store"));
    m.def("rerank_topk",
          [](const std::vector<FloatArray>& query_levels, const RankedList& ranked, std::size_t k, const EncoderWeights& w,
             const FeatureStore& store, float alpha, int workers) {
              const auto q = to_pyramid(query_levels);
              py::gil_scoped_release release;
              return rerank_topk(q, ranked, k, w, alpha, store, workers);
          },
          py::arg("query_levels"), py::arg("ranked"), py::arg("k"), py::arg("weights"), py::arg("store"),
          py::arg("alpha") = 0.5f, py::arg("workers") = 1);
    m.def("average_precision",
          [](const std::vector<std::string>& ranking, const std::set<std::string>& relevant,
             std::optional<std::size_t> cutoff) {
              RankedList r;
              for (const auto& id : ranking) r.entries.push_back({id, 0.0f, std::nullopt, 0.0f});
              return average_precision(r, relevant, cutoff);
          },
          py::arg("ranking"), py::arg("relevant"), py::arg("cutoff") = py::none());
}
