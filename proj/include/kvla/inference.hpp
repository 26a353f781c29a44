#pragma once

#include <string>
#include <vector>

#include "kvla/fusion.hpp"
#include "kvla/knowledge.hpp"
#include "kvla/metrics.hpp"
#include "kvla/model.hpp"
#include "kvla/world.hpp"

namespace kvla {

/// Everything needed to answer queries against one trained model.
struct Pipeline {
  Model model;
  KnowledgeBase kb;
  TextEmbedder embedder{0, 0};
  bool entity_translation = true;
  Tensor queries;           // [|Q|, d'], rows follow kb seen order
  Tensor position_bank;     // [|P|, d']
  std::vector<std::size_t> seen;  // kb entity id per query slot
};

Pipeline make_pipeline(Model model, KnowledgeBase kb, TextEmbedder embedder,
                       bool entity_translation);

/// Exactly one of the two fields is set: a seen entity name, or a free-text
/// description for the zero-shot path.
struct Query {
  std::string entity;
  std::string description;
};

/// Sigmoid of the queried entity's existence logit. Pure given the pipeline.
double classify(const Pipeline& pipeline, const Image& image,
                const Query& query);

/// Layer-and-head-averaged cross-attention of the query, upsampled to the
/// image and min-max normalized (a constant map collapses to zeros).
Heatmap ground(const Pipeline& pipeline, const Image& image,
               const Query& query);

enum class UnseenQueryMode { Skip, Description, Name, Both };

struct EntityEval {
  std::string entity;
  std::string query_kind;  // "seen", "description" or "name"
  std::size_t n = 0;
  std::size_t n_positive = 0;

  bool has_classification = false;
  double auc = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;
  double threshold = 0.0;

  bool has_grounding = false;
  std::size_t n_grounding = 0;
  double pointing_accuracy = 0.0;
  double mean_dice = 0.0;
  double mean_iou = 0.0;
  double detection_precision = 0.0;
  double detection_recall = 0.0;
};

/// One forward pass per sample with all requested queries appended; scores
/// feed classification metrics, normalized heatmaps of positive instances
/// feed the grounding metrics.
std::vector<EntityEval> evaluate(const Pipeline& pipeline,
                                 const std::vector<Sample>& samples,
                                 const std::vector<std::size_t>& indices,
                                 UnseenQueryMode unseen_mode);

}  // namespace kvla
