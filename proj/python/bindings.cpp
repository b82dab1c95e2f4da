// Copyright 2026 The atssnet Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
//
// pybind11 surface over the core: DSP primitives, SDR, WAV I/O and the
// embedder/separator models (fresh or from checkpoint files).

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "atss/checkpoint.hpp"
#include "atss/config.hpp"
#include "atss/pipeline.hpp"
#include "atss/wav.hpp"

namespace py = pybind11;
using namespace atss;

namespace {

using DArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using FArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Waveform to_wave(const DArray& arr, int sample_rate = kSampleRate) {
  if (arr.ndim() != 1) throw std::invalid_argument("expected a 1-D waveform");
  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.assign(arr.data(), arr.data() + arr.size());
  return w;
}

py::array from_wave(const Waveform& w) {
  py::array_t<double> out(
      std::vector<py::ssize_t>{static_cast<py::ssize_t>(w.samples.size())});
  std::copy(w.samples.begin(), w.samples.end(), out.mutable_data());
  return out;
}

Tensor<float> to_tensor2d(const FArray& arr) {
  if (arr.ndim() != 2) throw std::invalid_argument("expected a 2-D array");
  std::vector<float> data(arr.data(), arr.data() + arr.size());
  return Tensor<float>::from_data({arr.shape(0), arr.shape(1)},
                                  std::move(data));
}

Tensor<float> to_tensor1d(const FArray& arr) {
  if (arr.ndim() != 1) throw std::invalid_argument("expected a 1-D array");
  std::vector<float> data(arr.data(), arr.data() + arr.size());
  return Tensor<float>::from_data({arr.shape(0)}, std::move(data));
}

py::array tensor_to_array(const Tensor<float>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

StftConfig stft_config(int frame_len, int hop, int fft_size) {
  StftConfig cfg{frame_len, hop, fft_size};
  cfg.validate();
  return cfg;
}

class PyEmbedder {
 public:
  PyEmbedder(int embed_dim, int n_speakers, uint64_t seed)
      : impl_(make_config(embed_dim, n_speakers), seed) {}

  static PyEmbedder load(const std::string& path) {
    CheckpointData ckpt = load_checkpoint(path);
    const TensorEntry* fc1 = ckpt.find("embedder.fc1.b");
    const TensorEntry* fc2 = ckpt.find("embedder.fc2.b");
    if (!fc1 || !fc2)
      throw DataError("not an embedder checkpoint: " + path);
    PyEmbedder e(static_cast<int>(fc1->data.size()),
                 static_cast<int>(fc2->data.size()), 0);
    load_into(ckpt, e.impl_.named_parameters());
    return e;
  }

  py::array embed(const DArray& wave) const {
    return tensor_to_array(embed_waveform(to_wave(wave), impl_));
  }

  int embed_dim() const { return impl_.config().embed_dim; }
  int n_speakers() const { return impl_.config().n_speakers; }

  const Embedder<float>& impl() const { return impl_; }

 private:
  static EmbedderConfig make_config(int embed_dim, int n_speakers) {
    EmbedderConfig cfg;
    cfg.embed_dim = embed_dim;
    cfg.n_speakers = n_speakers;
    return cfg;
  }

  Embedder<float> impl_;
};

class PySeparator {
 public:
  PySeparator(int n_blocks, int n_heads, int d_k, int embed_dim, int freq_bins,
              const std::string& attention_axis, const std::string& mode,
              uint64_t seed)
      : impl_(make_config(n_blocks, n_heads, d_k, embed_dim, freq_bins,
                          attention_axis, mode),
              seed) {}

  static PySeparator load(const std::string& path) {
    CheckpointData ckpt = load_checkpoint(path);
    const Config cfg = Config::parse_text(ckpt.config_text);
    PySeparator s(cfg.n_blocks, cfg.n_heads, cfg.d_k, cfg.embed_dim,
                  cfg.stft.bins(), to_string(cfg.attention_axis),
                  to_string(cfg.ablation), 0);
    s.stft_ = cfg.stft;
    load_into(ckpt, s.impl_.named_parameters());
    return s;
  }

  // Magnitude [T, freq_bins] (+ embedding) -> mask(s) in (0,1).
  py::array mask(const FArray& mag, const FArray& emb) const {
    NoGradGuard ng;
    return tensor_to_array(
        impl_.forward_mask(to_tensor2d(mag), to_tensor1d(emb)));
  }

  std::vector<py::array> masks_pit(const FArray& mag) const {
    NoGradGuard ng;
    std::vector<py::array> out;
    for (const auto& m : impl_.forward(to_tensor2d(mag)))
      out.push_back(tensor_to_array(m));
    return out;
  }

  int64_t parameter_count() { return impl_.parameter_count(); }
  int n_masks() const { return impl_.config().n_masks(); }
  int freq_bins() const { return impl_.config().freq_bins; }

  const AtssModel<float>& impl() const { return impl_; }
  const StftConfig& stft() const { return stft_; }

 private:
  static ModelConfig make_config(int n_blocks, int n_heads, int d_k,
                                 int embed_dim, int freq_bins,
                                 const std::string& axis,
                                 const std::string& mode) {
    ModelConfig cfg;
    cfg.n_blocks = n_blocks;
    cfg.n_heads = n_heads;
    cfg.d_k = d_k;
    cfg.embed_dim = embed_dim;
    cfg.freq_bins = freq_bins;
    if (axis == "time") cfg.attention_axis = AttentionAxis::kTime;
    else if (axis == "freq") cfg.attention_axis = AttentionAxis::kFreq;
    else throw std::invalid_argument("attention_axis must be time or freq");
    if (mode == "full") cfg.mode = ModelMode::kFull;
    else if (mode == "no_attention") cfg.mode = ModelMode::kNoAttention;
    else if (mode == "pit") cfg.mode = ModelMode::kPit;
    else throw std::invalid_argument("mode must be full, no_attention or pit");
    cfg.validate();
    return cfg;
  }

  AtssModel<float> impl_;
  StftConfig stft_{};
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "attention-based target speaker separation core";

  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError",
                                       PyExc_ArithmeticError);

  m.def("hann_window", [](int n) {
    const auto w = hann_window(n);
    py::array_t<double> out(
        std::vector<py::ssize_t>{static_cast<py::ssize_t>(w.size())});
    std::copy(w.begin(), w.end(), out.mutable_data());
    return out;
  });

  m.def(
      "stft",
      [](const DArray& wave, int frame_len, int hop, int fft_size) {
        const auto spec =
            stft(to_wave(wave), stft_config(frame_len, hop, fft_size));
        py::array_t<std::complex<double>> out(
            std::vector<py::ssize_t>{static_cast<py::ssize_t>(spec.frames),
                                     static_cast<py::ssize_t>(spec.bins)});
        std::copy(spec.values.begin(), spec.values.end(), out.mutable_data());
        return out;
      },
      py::arg("wave"), py::arg("frame_len") = 400, py::arg("hop") = 160,
      py::arg("fft_size") = 512);

  m.def(
      "istft",
      [](const py::array_t<std::complex<double>,
                           py::array::c_style | py::array::forcecast>& spec,
         int64_t out_len, int frame_len, int hop, int fft_size) {
        if (spec.ndim() != 2)
          throw std::invalid_argument("expected a 2-D spectrogram");
        ComplexSpectrogram s;
        s.frames = spec.shape(0);
        s.bins = spec.shape(1);
        s.config = stft_config(frame_len, hop, fft_size);
        s.values.assign(spec.data(), spec.data() + spec.size());
        return from_wave(istft(s, s.config, out_len));
      },
      py::arg("spec"), py::arg("out_len"), py::arg("frame_len") = 400,
      py::arg("hop") = 160, py::arg("fft_size") = 512);

  m.def(
      "log_mel_fbank",
      [](const DArray& wave, int n_mels) {
        FbankConfig cfg;
        cfg.n_mels = n_mels;
        const auto feat = log_mel_fbank(to_wave(wave), cfg);
        py::array_t<double> out(
            std::vector<py::ssize_t>{static_cast<py::ssize_t>(feat.rows),
                                     static_cast<py::ssize_t>(feat.cols)});
        std::copy(feat.values.begin(), feat.values.end(), out.mutable_data());
        return out;
      },
      py::arg("wave"), py::arg("n_mels") = 64);

  m.def(
      "energy_vad",
      [](const DArray& fbank, double threshold_db) {
        if (fbank.ndim() != 2)
          throw std::invalid_argument("expected a 2-D feature matrix");
        FeatureMatrix feat;
        feat.rows = fbank.shape(0);
        feat.cols = fbank.shape(1);
        feat.values.assign(fbank.data(), fbank.data() + fbank.size());
        return energy_vad(feat, threshold_db);
      },
      py::arg("fbank"), py::arg("threshold_db") = 40.0);

  m.def(
      "rms_normalize",
      [](const DArray& wave, double target_rms) {
        return from_wave(rms_normalize(to_wave(wave), target_rms));
      },
      py::arg("wave"), py::arg("target_rms") = 0.05);

  m.def(
      "mix_at_snr",
      [](const DArray& speech, const DArray& noise, double snr_db) {
        const auto r = mix_at_snr(to_wave(speech), to_wave(noise), snr_db);
        return py::make_tuple(from_wave(r.mixture), from_wave(r.scaled_noise),
                              r.gain);
      },
      py::arg("speech"), py::arg("noise"), py::arg("snr_db"));

  m.def("sdr", [](const DArray& reference, const DArray& estimate) {
    return sdr(to_wave(reference), to_wave(estimate));
  });

  m.def("read_wav", [](const std::string& path) {
    const Waveform w = read_wav(path);
    return py::make_tuple(from_wave(w), w.sample_rate);
  });
  m.def(
      "write_wav",
      [](const std::string& path, const DArray& wave, int sample_rate) {
        int64_t clipped = 0;
        write_wav(path, to_wave(wave, sample_rate), &clipped);
        return clipped;
      },
      py::arg("path"), py::arg("wave"), py::arg("sample_rate") = kSampleRate);

  py::class_<PyEmbedder>(m, "Embedder")
      .def(py::init<int, int, uint64_t>(), py::arg("embed_dim") = 256,
           py::arg("n_speakers") = 2, py::arg("seed") = 0)
      .def_static("load", &PyEmbedder::load, py::arg("path"))
      .def("embed", &PyEmbedder::embed, py::arg("wave"))
      .def_property_readonly("embed_dim", &PyEmbedder::embed_dim)
      .def_property_readonly("n_speakers", &PyEmbedder::n_speakers);

  py::class_<PySeparator>(m, "Separator")
      .def(py::init<int, int, int, int, int, const std::string&,
                    const std::string&, uint64_t>(),
           py::arg("n_blocks") = 3, py::arg("n_heads") = 2,
           py::arg("d_k") = 64, py::arg("embed_dim") = 256,
           py::arg("freq_bins") = 257, py::arg("attention_axis") = "time",
           py::arg("mode") = "full", py::arg("seed") = 0)
      .def_static("load", &PySeparator::load, py::arg("path"))
      .def("mask", &PySeparator::mask, py::arg("magnitude"),
           py::arg("embedding"))
      .def("masks_pit", &PySeparator::masks_pit, py::arg("magnitude"))
      .def("parameter_count", &PySeparator::parameter_count)
      .def_property_readonly("n_masks", &PySeparator::n_masks)
      .def_property_readonly("freq_bins", &PySeparator::freq_bins);

  m.def(
      "separate",
      [](const DArray& mixture, const DArray& reference,
         const PyEmbedder& embedder, const PySeparator& separator,
         int frame_len, int hop, int fft_size, bool ones_mask) {
        return from_wave(separate(to_wave(mixture), to_wave(reference),
                                  embedder.impl(), separator.impl(),
                                  stft_config(frame_len, hop, fft_size),
                                  ones_mask));
      },
      py::arg("mixture"), py::arg("reference"), py::arg("embedder"),
      py::arg("separator"), py::arg("frame_len") = 400, py::arg("hop") = 160,
      py::arg("fft_size") = 512, py::arg("ones_mask") = false);
}
