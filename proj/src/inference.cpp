#include "kvla/inference.hpp"

#include <cmath>
#include <stdexcept>

#include "kvla/vision.hpp"

namespace kvla {

namespace {

double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::size_t seen_slot(const Pipeline& pipeline, const std::string& name) {
  const auto id = pipeline.kb.entity_id(name);
  if (!id.has_value()) {
    throw std::invalid_argument("unknown entity: " + name);
  }
  for (std::size_t slot = 0; slot < pipeline.seen.size(); ++slot) {
    if (pipeline.seen[slot] == *id) return slot;
  }
  throw std::invalid_argument("entity not in the seen query set: " + name +
                              " (supply a description instead)");
}

struct ResolvedQuery {
  Tensor matrix;
  std::size_t row = 0;
};

ResolvedQuery resolve(const Pipeline& pipeline, const Query& query) {
  const bool has_entity = !query.entity.empty();
  const bool has_description = !query.description.empty();
  if (has_entity == has_description) {
    throw std::invalid_argument(
        "query must carry exactly one of entity or description");
  }
  if (has_entity) {
    return {pipeline.queries, seen_slot(pipeline, query.entity)};
  }
  return {append_zero_shot_query(pipeline.queries,
                                 pipeline.embedder.embed(query.description)),
          pipeline.queries.shape()[0]};
}

}  // namespace

Pipeline make_pipeline(Model model, KnowledgeBase kb, TextEmbedder embedder,
                       bool entity_translation) {
  kb.validate();
  if (embedder.dim() != model.config.d_prime) {
    throw std::invalid_argument("embedder width does not match d'");
  }
  Pipeline p;
  p.model = std::move(model);
  p.kb = std::move(kb);
  p.embedder = embedder;
  p.entity_translation = entity_translation;
  p.queries = build_query_embeddings(p.kb, p.embedder, entity_translation);
  p.position_bank = build_position_bank(p.kb, p.embedder);
  p.seen = p.kb.seen_entities();
  return p;
}

double classify(const Pipeline& pipeline, const Image& image,
                const Query& query) {
  const ResolvedQuery rq = resolve(pipeline, query);
  const FeatureMap fm = encode_image(image, pipeline.model.vision,
                                     pipeline.model.config, nullptr);
  const FusionOutput out = fuse(fm, rq.matrix, pipeline.model.fusion,
                                pipeline.model.config, nullptr);
  return sigmoid_value(out.exist_logits.values()[rq.row]);
}

Heatmap ground(const Pipeline& pipeline, const Image& image,
               const Query& query) {
  const ResolvedQuery rq = resolve(pipeline, query);
  const FeatureMap fm = encode_image(image, pipeline.model.vision,
                                     pipeline.model.config, nullptr);
  const FusionOutput out = fuse(fm, rq.matrix, pipeline.model.fusion,
                                pipeline.model.config, nullptr);
  Heatmap map = extract_heatmap(out, rq.row, image.height, image.width);
  min_max_normalize(map);
  return map;
}

std::vector<EntityEval> evaluate(const Pipeline& pipeline,
                                 const std::vector<Sample>& samples,
                                 const std::vector<std::size_t>& indices,
                                 UnseenQueryMode unseen_mode) {
  struct Row {
    std::size_t kb_entity;
    std::string kind;
    std::vector<double> scores;
    std::vector<int> labels;
    std::vector<Heatmap> heatmaps;  // positives only
    std::vector<PixelMask> masks;
  };
  std::vector<Row> rows;
  for (std::size_t slot = 0; slot < pipeline.seen.size(); ++slot) {
    rows.push_back({pipeline.seen[slot], "seen", {}, {}, {}, {}});
  }
  Tensor matrix = pipeline.queries;
  for (std::size_t e = 0; e < pipeline.kb.entities.size(); ++e) {
    if (pipeline.kb.entities[e].seen) continue;
    const bool want_description = unseen_mode == UnseenQueryMode::Description ||
                                  unseen_mode == UnseenQueryMode::Both;
    const bool want_name = unseen_mode == UnseenQueryMode::Name ||
                           unseen_mode == UnseenQueryMode::Both;
    if (want_description) {
      matrix = append_zero_shot_query(
          matrix, pipeline.embedder.embed(pipeline.kb.entities[e].description));
      rows.push_back({e, "description", {}, {}, {}, {}});
    }
    if (want_name) {
      matrix = append_zero_shot_query(
          matrix, pipeline.embedder.embed(pipeline.kb.entities[e].name));
      rows.push_back({e, "name", {}, {}, {}, {}});
    }
  }

  for (std::size_t idx : indices) {
    const Sample& sample = samples[idx];
    const FeatureMap fm = encode_image(sample.image, pipeline.model.vision,
                                       pipeline.model.config, nullptr);
    const FusionOutput out = fuse(fm, matrix, pipeline.model.fusion,
                                  pipeline.model.config, nullptr);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      Row& row = rows[r];
      const int label = sample.labels[row.kb_entity];
      row.scores.push_back(sigmoid_value(out.exist_logits.values()[r]));
      row.labels.push_back(label);
      if (label == 1) {
        Heatmap map =
            extract_heatmap(out, r, sample.image.height, sample.image.width);
        min_max_normalize(map);
        row.heatmaps.push_back(std::move(map));
        row.masks.push_back(mask_from_indices(sample.masks[row.kb_entity],
                                              sample.image.pixels.size()));
      }
    }
  }

  std::vector<EntityEval> report;
  for (const Row& row : rows) {
    EntityEval ev;
    ev.entity = pipeline.kb.entities[row.kb_entity].name;
    ev.query_kind = row.kind;
    ev.n = row.scores.size();
    for (int y : row.labels) ev.n_positive += static_cast<std::size_t>(y);
    const bool both_classes =
        ev.n_positive > 0 && ev.n_positive < row.labels.size();
    if (both_classes) {
      ev.has_classification = true;
      ev.auc = auc(row.scores, row.labels);
      const ThresholdMetrics tm =
          f1_acc_at_best_threshold(row.scores, row.labels);
      ev.f1 = tm.f1;
      ev.accuracy = tm.accuracy;
      ev.threshold = tm.threshold;
    }
    if (!row.heatmaps.empty()) {
      ev.has_grounding = true;
      ev.n_grounding = row.heatmaps.size();
      double hits = 0.0, dice_sum = 0.0, iou_sum = 0.0;
      for (std::size_t i = 0; i < row.heatmaps.size(); ++i) {
        hits += pointing_game(row.heatmaps[i], row.masks[i]) ? 1.0 : 0.0;
        const OverlapMetrics om =
            dice_iou_best_threshold(row.heatmaps[i], row.masks[i]);
        dice_sum += om.dice;
        iou_sum += om.iou;
      }
      const double n = static_cast<double>(row.heatmaps.size());
      ev.pointing_accuracy = hits / n;
      ev.mean_dice = dice_sum / n;
      ev.mean_iou = iou_sum / n;
      const DetectionPR pr = detection_pr(row.heatmaps, row.masks);
      ev.detection_precision = pr.precision;
      ev.detection_recall = pr.recall;
    }
    report.push_back(std::move(ev));
  }
  return report;
}

}  // namespace kvla
