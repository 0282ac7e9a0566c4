#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "vos/augment.hpp"
#include "vos/cli.hpp"
#include "vos/image_ops.hpp"
#include "vos/infer.hpp"
#include "vos/memory.hpp"
#include "vos/metrics.hpp"
#include "vos/train.hpp"

namespace py = pybind11;
using namespace vos;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using I32 = py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const F64& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
  return out;
}

BinaryMap to_binary(const U8& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D mask");
  BinaryMap m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = a.data()[i] != 0;
  return m;
}

MaskMap to_mask(const I32& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D label map");
  return MaskMap(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)),
                 std::vector<int>(a.data(), a.data() + a.size()));
}

Frame to_frame(const F64& a) {
  if (a.ndim() != 3 || a.shape(0) != 3) throw std::invalid_argument("expected a (3,H,W) frame");
  return Frame(to_tensor(a));
}

ProbStack to_stack(const F64& a) {
  if (a.ndim() != 3) throw std::invalid_argument("expected a (C,H,W) probability stack");
  return {to_tensor(a), true};
}

py::dict report_dict(const MetricReport& r) {
  py::list objects;
  for (const auto& o : r.objects)
    objects.append(py::dict(py::arg("video") = o.video, py::arg("object") = o.object, py::arg("J") = o.mean_j,
                            py::arg("F") = o.mean_f, py::arg("frames") = o.frames));
  return py::dict(py::arg("J") = r.j, py::arg("F") = r.f, py::arg("J&F") = r.j_and_f, py::arg("objects") = objects);
}

TrainConfig preset_config(const std::string& preset, const std::string& stage) {
  const Stage s = parse_stage(stage);
  if (preset == "paper") return TrainConfig::paper(s);
  if (preset == "toy") return TrainConfig::toy(s);
  throw std::invalid_argument("unknown preset '" + preset + "'");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Semi-supervised video object segmentation: metrics, augmentation, memory, TTA and inference";

  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);

  m.def("jaccard", [](const U8& pred, const U8& gt) { return jaccard(to_binary(pred), to_binary(gt)); },
        py::arg("pred"), py::arg("gt"));
  m.def("boundary_f",
        [](const U8& pred, const U8& gt, int tolerance) { return boundary_f(to_binary(pred), to_binary(gt), tolerance); },
        py::arg("pred"), py::arg("gt"), py::arg("tolerance") = -1);
  m.def("format_score", &format_score, py::arg("value"), py::arg("decimals") = 4);
  m.def("j_and_f", [](double j, double f) { return MetricReport::from_global(j, f).j_and_f; }, py::arg("j"),
        py::arg("f"));
  m.def("evaluate", [](const fs::path& pred, const fs::path& gt) { return report_dict(evaluate(pred, gt)); },
        py::arg("pred_root"), py::arg("gt_root"));

  m.def("blur_kernel", [](int size, double angle) { return to_array(make_blur_kernel(size, angle).weights); },
        py::arg("size"), py::arg("angle"));
  m.def("motion_blur",
        [](const F64& frame, int size, double angle) {
          return to_array(apply_motion_blur(to_frame(frame), make_blur_kernel(size, angle)).pixels());
        },
        py::arg("frame"), py::arg("size"), py::arg("angle"));

  m.def("admit_sequence",
        [](int t_max, int interval, int frames) {
          MemoryConfig c;
          c.t_max = t_max;
          c.interval = interval;
          c.key_dim = 1;
          c.value_dim = 1;
          PixelMemory mem(c);
          for (int t = 0; t < frames; ++t) mem.admit(t, Var(Tensor({1, 1, 1})), {Var(Tensor({1, 1, 1}))}, t == 0);
          return mem.frame_indices();
        },
        py::arg("t_max"), py::arg("interval"), py::arg("frames"),
        "Frames held by a pixel memory after propagating `frames` frames.");

  m.def("lr_at", [](int iteration, const std::string& stage, const std::string& preset) {
          return lr_at(preset_config(preset, stage), iteration);
        },
        py::arg("iteration"), py::arg("stage") = "main", py::arg("preset") = "paper");

  m.def("soft_aggregate", [](const F64& probs) { return to_array(soft_aggregate({to_tensor(probs), false}).probs); },
        py::arg("probs"), "(K,H,W) object probabilities to (K+1,H,W) with a background channel.");
  m.def("flip_horizontal", [](const F64& stack) { return to_array(flip_horizontal(to_stack(stack)).probs); },
        py::arg("stack"));
  m.def("fuse_tta",
        [](const std::vector<std::vector<F64>>& branches, int rows, int cols) {
          std::vector<std::vector<ProbStack>> in;
          for (const auto& b : branches) {
            in.emplace_back();
            for (const auto& s : b) in.back().push_back(to_stack(s));
          }
          std::vector<py::array_t<double>> out;
          for (const auto& s : fuse_tta(in, rows, cols)) out.push_back(to_array(s.probs));
          return out;
        },
        py::arg("branches"), py::arg("rows"), py::arg("cols"));

  py::class_<VosNetwork>(m, "Network")
      .def(py::init([](std::uint64_t seed) {
             NetConfig c;
             c.seed = seed;
             return VosNetwork(c);
           }),
           py::arg("seed") = 0)
      .def_static("load", &VosNetwork::load, py::arg("path"))
      .def("save", &VosNetwork::save, py::arg("path"))
      .def_property_readonly("parameter_count", [](const VosNetwork& n) { return n.params().parameter_count(); })
      .def(
          "segment",
          [](const VosNetwork& net, const F64& frames, const I32& first_mask, std::vector<int> scales, bool flip,
             int t_max, int interval) {
            if (frames.ndim() != 4 || frames.shape(1) != 3) throw std::invalid_argument("expected (T,3,H,W) frames");
            const int T = static_cast<int>(frames.shape(0)), H = static_cast<int>(frames.shape(2)),
                      W = static_cast<int>(frames.shape(3));
            VideoSample v;
            v.id = "py";
            const std::size_t per = static_cast<std::size_t>(3) * H * W;
            for (int t = 0; t < T; ++t) {
              const double* p = frames.data() + per * t;
              v.frames.emplace_back(Tensor({3, H, W}, std::vector<double>(p, p + per)));
              v.masks.emplace_back(std::nullopt);
              v.frame_names.push_back(std::to_string(t));
            }
            v.masks[0] = to_mask(first_mask);
            v.object_ids = v.masks[0]->object_ids();
            v.validate();
            InferConfig c;
            c.scales = std::move(scales);
            c.flip = flip;
            c.t_max = t_max;
            c.interval = interval;
            TtaResult r;
            {
              py::gil_scoped_release release;
              r = run_tta(v, net, c);
            }
            py::array_t<std::int32_t> out({T, H, W});
            for (int t = 0; t < T; ++t)
              std::copy(r.masks[t].labels().begin(), r.masks[t].labels().end(),
                        out.mutable_data() + static_cast<std::size_t>(t) * H * W);
            return out;
          },
          py::arg("frames"), py::arg("first_mask"), py::arg("scales") = std::vector<int>{}, py::arg("flip") = false,
          py::arg("t_max") = 18, py::arg("interval") = 1,
          "Propagates the first-frame label map through (T,3,H,W) frames in [0,1].");

  m.def("run_cli", [](const std::vector<std::string>& args) { return run_cli(args); }, py::arg("args"),
        "Runs the command-line tool in-process and returns its exit code.");
}
