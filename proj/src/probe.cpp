#include "conceptlab/probe.hpp"

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <stdexcept>

#include "conceptlab/archive.hpp"

using nlohmann::json;

namespace conceptlab::probe {

Mat GlobalPool::forward(const Tensor& x) {
  x_cache = x;
  const int P = x.plane();
  Mat out(x.c, x.n);
  if (use_max) argmax_cache.assign(static_cast<size_t>(x.n) * x.c, 0);
  for (int n = 0; n < x.n; ++n)
    for (int c = 0; c < x.c; ++c) {
      const double* plane = x.image(n) + static_cast<size_t>(c) * P;
      if (use_max) {
        int best = 0;
        for (int p = 1; p < P; ++p)
          if (plane[p] > plane[best]) best = p;
        argmax_cache[static_cast<size_t>(n) * x.c + c] = best;
        out(c, n) = plane[best];
      } else {
        double acc = 0.0;
        for (int p = 0; p < P; ++p) acc += plane[p];
        out(c, n) = acc / P;
      }
    }
  return out;
}

Tensor GlobalPool::backward(const Mat& gy) {
  Tensor gx(x_cache.n, x_cache.c, x_cache.h, x_cache.w);
  const int P = gx.plane();
  for (int n = 0; n < gx.n; ++n)
    for (int c = 0; c < gx.c; ++c) {
      double* plane = gx.image(n) + static_cast<size_t>(c) * P;
      if (use_max) {
        plane[argmax_cache[static_cast<size_t>(n) * gx.c + c]] = gy(c, n);
      } else {
        const double g = gy(c, n) / P;
        for (int p = 0; p < P; ++p) plane[p] = g;
      }
    }
  return gx;
}

void ProbeNet::build(const ProbeConfig& cfg, int n_axes, Rng& rng) {
  cfg_ = cfg;
  n_axes_ = n_axes;
  pool_.use_max = cfg.max_pooling;
  const auto& ch = cfg.channels;
  stem_.build("probe.stem", 3, ch[0], 3, 1, 1, rng);
  convs_.clear();
  norms_.clear();
  downs_.clear();
  layout_.clear();
  int li = 0;
  for (size_t l = 0; l < ch.size(); ++l) {
    layout_.push_back(2);
    for (int b = 0; b < 2; ++b, ++li) {
      convs_.emplace_back();
      norms_.emplace_back();
      convs_.back().build("probe.l" + std::to_string(l) + ".conv" + std::to_string(b), ch[l],
                          ch[l], 3, 1, 1, rng);
      norms_.back().build("probe.l" + std::to_string(l) + ".ln" + std::to_string(b), ch[l]);
    }
    if (l + 1 < ch.size()) {
      downs_.emplace_back();
      downs_.back().build("probe.down" + std::to_string(l), ch[l], ch[l + 1], 3, 2, 1, rng);
    }
  }
  acts_.resize(convs_.size());
  heads_.clear();
  for (int a = 0; a < n_axes; ++a) {
    heads_.emplace_back();
    heads_.back().build("probe.head" + std::to_string(a), ch.back(), 2, rng);
  }
  params_.clear();
  stem_.collect(params_);
  for (size_t i = 0; i < convs_.size(); ++i) {
    convs_[i].collect(params_);
    norms_[i].collect(params_);
  }
  for (auto& d : downs_) d.collect(params_);
  for (auto& h : heads_) h.collect(params_);
}

Mat ProbeNet::features(const Tensor& x) {
  Tensor h = stem_.forward(x);
  int li = 0;
  for (size_t l = 0; l < layout_.size(); ++l) {
    for (int b = 0; b < layout_[l]; ++b, ++li) {
      h = convs_[li].forward(h);
      h = norms_[li].forward(h);
      h = acts_[li].forward(h);
    }
    if (l + 1 < layout_.size()) h = downs_[l].forward(h);
  }
  return pool_.forward(h);
}

std::vector<Mat> ProbeNet::forward(const Tensor& x) {
  Mat f = features(x);
  std::vector<Mat> logits;
  logits.reserve(heads_.size());
  for (auto& head : heads_) logits.push_back(head.forward(f));
  return logits;
}

void ProbeNet::backward(const std::vector<Mat>& g_logits) {
  Mat gf;
  for (size_t a = 0; a < heads_.size(); ++a) {
    Mat g = heads_[a].backward(g_logits[a]);
    if (a == 0) gf = g;
    else gf += g;
  }
  Tensor g = pool_.backward(gf);
  int li = static_cast<int>(convs_.size()) - 1;
  for (int l = static_cast<int>(layout_.size()) - 1; l >= 0; --l) {
    if (l + 1 < static_cast<int>(layout_.size())) g = downs_[l].backward(g);
    for (int b = layout_[l] - 1; b >= 0; --b, --li) {
      g = acts_[li].backward(g);
      g = norms_[li].backward(g);
      g = convs_[li].backward(g);
    }
  }
  stem_.backward(g);
}

namespace {

void softmax_columns(Mat& m) {
  for (Eigen::Index n = 0; n < m.cols(); ++n) {
    const double mx = m.col(n).maxCoeff();
    m.col(n) = (m.col(n).array() - mx).exp();
    m.col(n) /= m.col(n).sum();
  }
}

json probe_cfg_to_json(const ProbeConfig& c) {
  return json{{"channels", c.channels},
              {"train_steps", c.train_steps},
              {"images_per_class", c.images_per_class},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"weight_decay", c.weight_decay},
              {"accuracy_target", c.accuracy_target},
              {"eval_every", c.eval_every},
              {"max_pooling", c.max_pooling}};
}

ProbeConfig probe_cfg_from_json(const json& j) {
  ProbeConfig c;
  c.channels = j.at("channels").get<std::vector<int>>();
  c.train_steps = j.at("train_steps").get<long>();
  c.images_per_class = j.at("images_per_class").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.accuracy_target = j.at("accuracy_target").get<double>();
  c.eval_every = j.at("eval_every").get<long>();
  c.max_pooling = j.at("max_pooling").get<bool>();
  return c;
}

struct LabeledImages {
  Tensor images;
  std::vector<std::string> labels;
};

LabeledImages gather(const std::vector<const dgp::RenderedSample*>& samples) {
  LabeledImages out;
  if (samples.empty()) return out;
  const Tensor& first = samples[0]->image;
  out.images = Tensor(static_cast<int>(samples.size()), first.c, first.h, first.w);
  for (size_t i = 0; i < samples.size(); ++i) {
    std::copy_n(samples[i]->image.v.data(), out.images.per_image(),
                out.images.image(static_cast<int>(i)));
    out.labels.push_back(samples[i]->class_label);
  }
  return out;
}

}  // namespace

std::unique_ptr<ProbeState> train_probe(const dgp::ConceptSpaceSpec& spec,
                                        const ProbeConfig& cfg, uint64_t seed) {
  const dgp::ConceptSpaceSpec diverse = spec.with_max_diversity();
  diverse.validate();
  const int d = diverse.active_axis_count();
  if (d < 1) throw std::invalid_argument("train_probe: spec has no varying axis");
  for (int i : diverse.active_axis_indices())
    if (diverse.axes[i].value_means.size() < 2)
      throw std::invalid_argument("train_probe: heads need two values per axis");

  auto st = std::make_unique<ProbeState>();
  st->cfg = cfg;
  st->spec = diverse;
  st->seed = seed;
  for (int i : diverse.active_axis_indices()) st->axis_names.push_back(diverse.axes[i].name);
  Rng init_rng = Rng::derive(seed, "probe-init");
  st->net.build(cfg, d, init_rng);

  const dgp::Dataset data =
      dgp::build_dataset(diverse, diverse.all_class_labels(), cfg.images_per_class,
                         Rng::derive(seed, "probe-data").next_u64());

  std::vector<const dgp::RenderedSample*> train_set, held_out;
  for (size_t i = 0; i < data.samples.size(); ++i)
    ((i % 10 == 9) ? held_out : train_set).push_back(&data.samples[i]);

  nn::AdamW opt;
  nn::AdamW::Config oc;
  oc.lr = cfg.learning_rate;
  oc.weight_decay = cfg.weight_decay;
  opt.attach(st->net.params(), oc);
  Rng rng = Rng::derive(seed, "probe-train");

  auto target_bits = [&](const std::string& label) {
    std::vector<int> bits(d);
    for (int a = 0; a < d; ++a) bits[a] = label[a] - '0';
    return bits;
  };

  // per-axis accuracy over a sample list, evaluated in chunks
  std::vector<std::vector<long>> confusion;  // per axis: [true*2 + pred]
  auto accuracy_on = [&](const std::vector<const dgp::RenderedSample*>& set,
                         std::vector<double>& acc) {
    acc.assign(d, 0.0);
    confusion.assign(d, std::vector<long>(4, 0));
    const int chunk = 256;
    long total = 0;
    for (size_t pos = 0; pos < set.size(); pos += chunk) {
      std::vector<const dgp::RenderedSample*> part(
          set.begin() + pos, set.begin() + std::min(set.size(), pos + chunk));
      LabeledImages li = gather(part);
      auto logits = st->net.forward(li.images);
      for (int n = 0; n < li.images.n; ++n) {
        const auto bits = target_bits(li.labels[n]);
        for (int a = 0; a < d; ++a) {
          const int pred = logits[a](1, n) > logits[a](0, n) ? 1 : 0;
          confusion[a][bits[a] * 2 + pred] += 1;
          if (pred == bits[a]) acc[a] += 1.0;
        }
      }
      total += li.images.n;
    }
    for (int a = 0; a < d; ++a) acc[a] /= std::max<long>(total, 1);
  };

  std::vector<double> held_acc(d, 0.0);
  bool reached = false;
  for (long s = 1; s <= cfg.train_steps; ++s) {
    std::vector<const dgp::RenderedSample*> batch;
    for (int b = 0; b < cfg.batch_size; ++b)
      batch.push_back(train_set[rng.uniform_index(train_set.size())]);
    LabeledImages li = gather(batch);
    auto logits = st->net.forward(li.images);
    std::vector<Mat> glogits(d);
    for (int a = 0; a < d; ++a) {
      Mat p = logits[a];
      softmax_columns(p);
      for (int n = 0; n < li.images.n; ++n) p(li.labels[n][a] - '0', n) -= 1.0;
      glogits[a] = p / li.images.n;
    }
    nn::zero_grads(st->net.params());
    st->net.backward(glogits);
    opt.step();

    if (s % cfg.eval_every == 0 || s == cfg.train_steps) {
      accuracy_on(held_out, held_acc);
      if (*std::min_element(held_acc.begin(), held_acc.end()) >= cfg.accuracy_target) {
        reached = true;
        break;
      }
    }
  }
  if (!reached) {
    accuracy_on(held_out, held_acc);
    if (*std::min_element(held_acc.begin(), held_acc.end()) < cfg.accuracy_target) {
      std::ostringstream msg;
      msg << "train_probe: held-out accuracy below " << cfg.accuracy_target
          << " after " << cfg.train_steps << " steps;";
      for (int a = 0; a < d; ++a)
        msg << " " << st->axis_names[a] << "=" << held_acc[a] << " confusion["
            << confusion[a][0] << "," << confusion[a][1] << ";" << confusion[a][2] << ","
            << confusion[a][3] << "]";
      throw std::runtime_error(msg.str());
    }
  }
  st->held_out_accuracy = *std::min_element(held_acc.begin(), held_acc.end());
  return st;
}

Vec concept_coordinates(const Tensor& images, ProbeState& probe) {
  if (images.n < 1) throw std::invalid_argument("concept_coordinates: empty batch");
  auto logits = probe.net.forward(images);
  const int d = static_cast<int>(logits.size());
  Vec coords(d);
  for (int a = 0; a < d; ++a) {
    Mat p = logits[a];
    softmax_columns(p);
    coords[a] = p.row(1).mean();
  }
  return coords;
}

Evaluation evaluate(const Tensor& images, ProbeState& probe, const std::string& target_class) {
  if (images.n < 1) throw std::invalid_argument("evaluate: empty batch");
  auto logits = probe.net.forward(images);
  const int d = static_cast<int>(logits.size());
  if (static_cast<int>(target_class.size()) != d)
    throw std::invalid_argument("evaluate: target class does not match probe axes");
  Evaluation ev;
  ev.coordinates.resize(d);
  ev.per_axis_accuracy = Vec::Zero(d);
  std::vector<char> all_right(images.n, 1);
  for (int a = 0; a < d; ++a) {
    Mat p = logits[a];
    softmax_columns(p);
    ev.coordinates[a] = p.row(1).mean();
    const int want = target_class[a] - '0';
    for (int n = 0; n < images.n; ++n) {
      const int pred = p(1, n) > p(0, n) ? 1 : 0;
      if (pred == want) ev.per_axis_accuracy[a] += 1.0;
      else all_right[n] = 0;
    }
    ev.per_axis_accuracy[a] /= images.n;
  }
  for (int n = 0; n < images.n; ++n) ev.joint_accuracy += all_right[n];
  ev.joint_accuracy /= images.n;
  return ev;
}

void ProbeState::save_file(const std::string& path) const {
  auto* self = const_cast<ProbeState*>(this);
  json meta;
  meta["kind"] = "probe_checkpoint";
  meta["cfg"] = probe_cfg_to_json(cfg);
  meta["spec"] = json::parse(spec.to_json());
  meta["axis_names"] = axis_names;
  meta["held_out_accuracy"] = held_out_accuracy;
  meta["seed"] = seed;
  std::vector<archive::TensorRef> tensors;
  for (const nn::Param* p : self->net.params())
    tensors.push_back({p->name, p->w.data(), p->w.size()});
  archive::save_file(path, meta, tensors);
}

std::unique_ptr<ProbeState> ProbeState::load_file(const std::string& path) {
  archive::Loaded ar = archive::load_file(path);
  if (ar.meta.at("kind") != "probe_checkpoint")
    throw std::runtime_error("probe: wrong archive kind");
  auto st = std::make_unique<ProbeState>();
  st->cfg = probe_cfg_from_json(ar.meta.at("cfg"));
  st->spec = dgp::ConceptSpaceSpec::from_json(ar.meta.at("spec").dump());
  st->axis_names = ar.meta.at("axis_names").get<std::vector<std::string>>();
  st->held_out_accuracy = ar.meta.at("held_out_accuracy").get<double>();
  st->seed = ar.meta.at("seed").get<uint64_t>();
  Rng init_rng = Rng::derive(st->seed, "probe-init");
  st->net.build(st->cfg, static_cast<int>(st->axis_names.size()), init_rng);
  for (nn::Param* p : st->net.params()) {
    auto it = ar.tensors.find(p->name);
    if (it == ar.tensors.end() || it->second.size() != p->w.size())
      throw std::runtime_error("probe: missing or mismatched tensor " + p->name);
    p->w.assign(it->second.begin(), it->second.end());
  }
  return st;
}

}  // namespace conceptlab::probe
