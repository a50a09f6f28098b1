#include "advdino/pretrain.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <deque>
#include <iomanip>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>

#include "advdino/optim.hpp"

namespace advdino::train {

PretrainConfig PretrainConfig::paper() {
  PretrainConfig c;
  c.encoder = vit::EncoderConfig::paper();
  c.head.prototypes = 65536;
  c.head.hidden_dim = 2048;
  c.head.bottleneck_dim = 256;
  c.augment = aug::AugmentConfig::paper();
  c.batch_size = 128;
  c.steps = 430000;
  c.warmup_steps = 10000;
  return c;
}

void PretrainConfig::validate() const {
  encoder.validate();
  head.validate();
  augment.validate();
  weights.validate();
  if (augment.global_size != encoder.global_size || augment.local_size != encoder.local_size ||
      augment.patch_size != encoder.patch_size) {
    throw Error("augmentation crop geometry must match the encoder");
  }
  if (batch_size < 2) throw Error("batch_size must be at least 2 (KoLeo needs neighbours)");
  if (steps == 0) throw Error("steps must be positive");
  if (warmup_steps > steps) throw Error("warmup_steps exceeds steps");
  if (!(lr > 0.0) || min_lr < 0.0 || min_lr > lr) throw Error("learning rates must satisfy 0 <= min_lr <= lr, lr > 0");
  if (weight_decay < 0.0) throw Error("weight_decay must be non-negative");
  if (!(ema_start >= 0.0 && ema_start <= ema_end && ema_end <= 1.0)) throw Error("EMA momentum schedule must lie in [0, 1]");
  if (!(disc_lr_scale > 0.0)) throw Error("disc_lr_scale must be positive");
  if (disc_extra_steps > 0 && disc_queue_batches == 0) throw Error("disc_queue_batches must be positive");
  if (koleo_weight < 0.0 || !(koleo_eps > 0.0)) throw Error("KoLeo weight must be >= 0 and eps > 0");
  if (log_every == 0) throw Error("log_every must be positive");
}

ParamStore PretrainState::checkpoint() const {
  ParamStore flat;
  auto put = [&](const std::string& prefix, const ParamStore& p) {
    for (const auto& [k, v] : p) flat[prefix + k] = v;
  };
  put("student.encoder.", student_encoder);
  put("student.head.", student_head);
  put("teacher.encoder.", teacher_encoder);
  put("teacher.head.", teacher_head);
  put("discriminator.", discriminator);
  flat["center.cls"] = cls_center;
  flat["center.patch"] = patch_center;
  return flat;
}

PretrainState PretrainState::from_checkpoint(const ParamStore& flat) {
  PretrainState s;
  const std::vector<std::pair<std::string, ParamStore*>> groups{{"student.encoder.", &s.student_encoder},
                                                                {"student.head.", &s.student_head},
                                                                {"teacher.encoder.", &s.teacher_encoder},
                                                                {"teacher.head.", &s.teacher_head},
                                                                {"discriminator.", &s.discriminator}};
  for (const auto& [k, v] : flat) {
    if (k == "center.cls") {
      s.cls_center = v;
      continue;
    }
    if (k == "center.patch") {
      s.patch_center = v;
      continue;
    }
    bool placed = false;
    for (const auto& [prefix, store] : groups) {
      if (k.rfind(prefix, 0) == 0) {
        (*store)[k.substr(prefix.size())] = v;
        placed = true;
        break;
      }
    }
    if (!placed) throw Error("unexpected checkpoint entry '" + k + "'");
  }
  if (s.teacher_encoder.empty()) throw Error("checkpoint has no teacher encoder");
  return s;
}

namespace {

Var koleo_per_crop(Var cls, std::size_t batch, std::size_t n_global, double eps) {
  Graph& g = *cls.graph;
  Var acc = g.constant(Tensor::scalar(0.0));
  for (std::size_t a = 0; a < n_global; ++a) {
    std::vector<std::size_t> rows(batch);
    for (std::size_t b = 0; b < batch; ++b) rows[b] = b * n_global + a;
    acc = acc + ssl::koleo_loss(ops::gather(cls, rows), eps);
  }
  return ops::scale(acc, 1.0 / static_cast<double>(n_global));
}

// Discriminator-only updates on the queued embeddings, treated as constants.
void disc_refresh(ParamStore& disc, AdamW& opt, const std::deque<std::pair<Tensor, std::vector<std::size_t>>>& queue,
                  const adv::DiscriminatorConfig& dcfg, std::size_t steps, double lr) {
  std::size_t rows = 0;
  for (const auto& [x, y] : queue) rows += y.size();
  Tensor all(Shape{rows, dcfg.input_dim});
  std::vector<std::size_t> labels;
  labels.reserve(rows);
  double* out = all.data();
  for (const auto& [x, y] : queue) {
    out = std::copy(x.data(), x.data() + x.numel(), out);
    labels.insert(labels.end(), y.begin(), y.end());
  }
  for (std::size_t s = 0; s < steps; ++s) {
    Graph g;
    Bound b(g, disc, "disc.", true);
    Var loss = adv::adversarial_loss(adv::discriminator_logits(g.constant(all), b, dcfg), labels, rows, 1);
    opt.step(disc, b.gradients(g.backward(loss)), lr);
  }
}

}  // namespace

PretrainState pretrain(std::span<const Tensor> tiles, std::span<const std::size_t> domains, std::size_t num_domains,
                       const PretrainConfig& cfg, std::uint64_t seed, const std::function<void(const StepLog&)>& on_log) {
  cfg.validate();
  if (tiles.size() != domains.size()) throw ShapeError("one domain label per tile required");
  if (tiles.size() < cfg.batch_size) throw Error("fewer tiles than the batch size");
  for (auto d : domains) {
    if (d >= num_domains) throw Error("domain label out of range");
  }
  const bool adversarial = cfg.weights.adv > 0.0;
  const std::size_t ng = cfg.augment.n_global, nl = cfg.augment.n_local, crops = ng + nl;
  const std::size_t n_patches = cfg.encoder.grid(cfg.encoder.global_size) * cfg.encoder.grid(cfg.encoder.global_size);
  const std::size_t dim = cfg.encoder.embed_dim;

  std::mt19937_64 rng(seed);
  PretrainState st;
  st.student_encoder = vit::init_encoder(cfg.encoder, rng);
  if (cfg.adapt_patch_embed) {
    Tensor w3 = trunc_normal({dim, 3, cfg.encoder.patch_size, cfg.encoder.patch_size}, 0.02, rng);
    st.student_encoder["patch_embed.weight"] = vit::adapt_patch_embed_channels(w3, cfg.encoder.channels);
  }
  st.student_head = ssl::init_head(cfg.head, dim, rng);
  st.teacher_encoder = st.student_encoder;
  st.teacher_head = st.student_head;
  adv::DiscriminatorConfig dcfg{dim, cfg.disc_hidden, num_domains};
  if (adversarial) st.discriminator = adv::init_discriminator(dcfg, rng);
  st.cls_center = Tensor(Shape{cfg.head.prototypes}, 0.0);
  st.patch_center = Tensor(Shape{cfg.head.prototypes}, 0.0);

  AdamW::Config oc;
  oc.weight_decay = cfg.weight_decay;
  AdamW opt_enc(oc), opt_head(oc), opt_disc(oc);
  const auto pairs = ssl::cross_view_pairs(cfg.batch_size, ng, nl);
  std::deque<std::pair<Tensor, std::vector<std::size_t>>> queue;
  std::vector<std::size_t> order(tiles.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double lr = warmup_cosine(cfg.lr, cfg.min_lr, cfg.warmup_steps, cfg.steps, step);
    const double momentum = cosine_ramp(cfg.ema_start, cfg.ema_end, cfg.steps, step);

    // Batch without replacement, then multi-crop views.
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      std::uniform_int_distribution<std::size_t> pick(b, order.size() - 1);
      std::swap(order[b], order[pick(rng)]);
    }
    std::vector<Tensor> g_imgs, l_imgs, m_imgs;
    std::vector<std::vector<bool>> masks;
    std::vector<std::size_t> labels;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const std::size_t t = order[b];
      aug::CropSet cs = aug::multi_crop(tiles[t], t, domains[t], cfg.augment, rng);
      for (auto& c : cs.globals) g_imgs.push_back(std::move(c.image));
      for (auto& c : cs.locals) l_imgs.push_back(std::move(c.image));
      for (auto& m : cs.masked) {
        m_imgs.push_back(std::move(m.crop.image));
        masks.push_back(std::move(m.mask));
      }
    }
    labels.resize(cfg.batch_size * crops);
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const std::size_t d = domains[order[b]];
      for (std::size_t a = 0; a < ng; ++a) labels[b * ng + a] = d;
      for (std::size_t l = 0; l < nl; ++l) labels[cfg.batch_size * ng + b * nl + l] = d;
    }
    // Masked positions as rows of the flattened [views * N, D] patch table.
    std::vector<std::size_t> masked_rows, row_view;
    for (std::size_t v = 0; v < masks.size(); ++v) {
      for (std::size_t p = 0; p < n_patches; ++p) {
        if (masks[v][p]) {
          masked_rows.push_back(v * n_patches + p);
          row_view.push_back(v);
        }
      }
    }

    // Teacher targets (no gradient).
    Tensor t_cls_logits, t_patch_logits;
    {
      Graph tg;
      Bound te(tg, st.teacher_encoder, "", false), th(tg, st.teacher_head, "", false);
      vit::EncodedBatch tb = vit::encode_batch(te, cfg.encoder, g_imgs);
      t_cls_logits = ssl::dino_head(tb.cls, th).value();
      if (!masked_rows.empty()) {
        Var flat = ops::reshape(tb.patches, {g_imgs.size() * n_patches, dim});
        t_patch_logits = ssl::dino_head(ops::gather(flat, masked_rows), th).value();
      }
    }

    Graph g;
    Bound se(g, st.student_encoder, "enc.", true), sh(g, st.student_head, "head.", true);
    vit::EncodedBatch sg = vit::encode_batch(se, cfg.encoder, g_imgs);
    vit::EncodedBatch sl = vit::encode_batch(se, cfg.encoder, l_imgs);
    Var cls_all = ops::concat({sg.cls, sl.cls}, 0);
    Var s_logits = ssl::dino_head(cls_all, sh);
    Var l_distill = ssl::distillation_loss(s_logits, t_cls_logits, pairs, st.cls_center, cfg.head.student_temp,
                                           cfg.head.teacher_temp);
    Var l_mim = g.constant(Tensor::scalar(0.0));
    if (!masked_rows.empty()) {
      vit::EncodedBatch sm = vit::encode_batch(se, cfg.encoder, m_imgs, &masks);
      Var flat = ops::reshape(sm.patches, {m_imgs.size() * n_patches, dim});
      Var s_patch_logits = ssl::dino_head(ops::gather(flat, masked_rows), sh);
      l_mim = ssl::mim_loss(g, s_patch_logits, t_patch_logits, row_view, st.patch_center, cfg.head.student_temp,
                            cfg.head.teacher_temp);
    }
    Var l_koleo = koleo_per_crop(sg.cls, cfg.batch_size, ng, cfg.koleo_eps);
    Var l_adv = g.constant(Tensor::scalar(0.0));
    double disc_acc = 0.0;
    std::optional<Bound> sd;
    if (adversarial) {
      sd.emplace(g, st.discriminator, "disc.", true);
      Var logits = adv::discriminator_logits(adv::grad_reverse(cls_all), *sd, dcfg);
      l_adv = adv::adversarial_loss(logits, labels, cfg.batch_size, crops);
      const Tensor lv = logits.value();
      std::size_t hit = 0;
      for (std::size_t r = 0; r < labels.size(); ++r) {
        std::size_t arg = 0;
        for (std::size_t k = 1; k < num_domains; ++k) {
          if (lv.at(r, k) > lv.at(r, arg)) arg = k;
        }
        hit += arg == labels[r];
      }
      disc_acc = static_cast<double>(hit) / static_cast<double>(labels.size());
    }
    for (Var part : {l_distill, l_mim, l_adv, l_koleo}) {
      if (std::isfinite(part.value().item())) continue;
      const auto bad = g.first_nonfinite();
      throw NonFiniteError("non-finite pretraining loss at step " + std::to_string(step), bad.value_or(part.id),
                           bad ? g.op_name(*bad) : "loss");
    }
    Var total = adv::total_loss(l_distill, l_mim, l_adv, cfg.weights) + ops::scale(l_koleo, cfg.koleo_weight);
    const auto grads = g.backward(total);
    opt_enc.step(st.student_encoder, se.gradients(grads), lr);
    opt_head.step(st.student_head, sh.gradients(grads), lr);
    if (sd) {
      opt_disc.step(st.discriminator, sd->gradients(grads), lr * cfg.disc_lr_scale);
      if (cfg.disc_extra_steps > 0) {
        queue.emplace_back(cls_all.value(), labels);
        if (queue.size() > cfg.disc_queue_batches) queue.pop_front();
        disc_refresh(st.discriminator, opt_disc, queue, dcfg, cfg.disc_extra_steps, lr * cfg.disc_lr_scale);
      }
    }

    ssl::ema_update(st.teacher_encoder, st.student_encoder, momentum);
    ssl::ema_update(st.teacher_head, st.student_head, momentum);
    st.cls_center = ssl::update_center(st.cls_center, t_cls_logits, cfg.head.center_momentum);
    if (!masked_rows.empty()) {
      st.patch_center = ssl::update_center(st.patch_center, t_patch_logits, cfg.head.center_momentum);
    }

    StepLog log;
    log.step = step;
    log.lr = lr;
    log.ema_momentum = momentum;
    log.distill = l_distill.value().item();
    log.mim = l_mim.value().item();
    log.adv = l_adv.value().item();
    log.koleo = l_koleo.value().item();
    log.total = total.value().item();
    log.disc_accuracy = disc_acc;
    const double ssl_sum = log.distill + log.mim;
    log.adv_ssl_ratio = ssl_sum > 0.0 ? cfg.weights.adv * log.adv / ssl_sum : 0.0;
    st.curve.push_back(log);
    if (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
      spdlog::info("step {}/{} lr {:.2e} distill {:.4f} mim {:.4f} adv {:.4f} koleo {:.4f} disc_acc {:.3f}", step + 1,
                   cfg.steps, lr, log.distill, log.mim, log.adv, log.koleo, disc_acc);
      if (on_log) on_log(log);
    }
  }
  return st;
}

std::vector<std::vector<double>> embed_tiles(std::span<const Tensor> tiles, const ParamStore& teacher_encoder,
                                             const vit::EncoderConfig& config) {
  std::vector<Tensor> resized;
  resized.reserve(tiles.size());
  for (const auto& t : tiles) {
    if (t.rank() != 3 || t.dim(0) != config.channels || t.dim(1) != t.dim(2)) {
      throw ShapeError("tile geometry " + shape_str(t.shape()) + " does not match the encoder");
    }
    const double side = static_cast<double>(t.dim(1));
    resized.push_back(t.dim(1) == config.global_size ? t : aug::resize_region(t, 0.0, 0.0, side, config.global_size));
  }
  return vit::embed_cls(resized, teacher_encoder, config);
}

std::string curve_csv(const std::vector<StepLog>& curve) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "step,lr,ema_momentum,distill,mim,adv,koleo,total,disc_accuracy,adv_ssl_ratio\n";
  for (const auto& s : curve) {
    os << s.step << ',' << s.lr << ',' << s.ema_momentum << ',' << s.distill << ',' << s.mim << ',' << s.adv << ','
       << s.koleo << ',' << s.total << ',' << s.disc_accuracy << ',' << s.adv_ssl_ratio << '\n';
  }
  return os.str();
}

}  // namespace advdino::train
