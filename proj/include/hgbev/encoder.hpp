#pragma once

// The BEV encoder: toy image backbone, temporal self-attention, height-aware
// reference points, cross-view aggregation and the recurrent frame loop.
//
// Layer l reads and writes parameters under "layer<l>."; the learnable BEV
// queries are "bev.queries" and the backbone is "backbone.conv{1,2,3}".

#include "hgbev/cross_view.hpp"
#include "hgbev/height_aware.hpp"

#include <optional>
#include <vector>

namespace hgbev {

struct EncoderConfig {
  GridSpec grid;
  int n_layers = 3;
  int n_ref = 4;
  int m_neighbors = 4;
  int n_heads = 4;
  int n_def_points = 2;
  int history_len = 3;  // frames per temporal window, current included
  int ffn_hidden = 32;
  int height_hidden = 16;
  int backbone_hidden = 8;
  double neighbor_radius = 1.0;
  double image_stride = 8.0;
  bool vha = true;
  bool dhca = true;
  int uniform_nref = 0;  // reference points per cell with VHA off; 0 means n_ref

  void validate() const;
  /// Reference points per cell actually used.
  int refs_per_cell() const { return vha ? n_ref : (uniform_nref > 0 ? uniform_nref : n_ref); }
  int neighbors() const { return dhca ? m_neighbors : 0; }
  DhcaShape dhca_shape() const;
  DcaShape dca_shape() const;
};

void init_encoder(ParamStore& store, const EncoderConfig& cfg, std::mt19937_64& rng);

// ---------------------------------------------------------------- backbone

/// images (n_view, rows, cols, 3) with values in [0, 1] -> (n_view, ceil(rows/8), ceil(cols/8), C).
MultiViewFeatures toy_backbone(Graph& g, ParamStore& store, const EncoderConfig& cfg, Var images);

// ---------------------------------------------------------------- layers

/// Previous-frame encoder output and the motion mapping current-frame points
/// into the previous frame.
struct History {
  Tensor bev;  // (h_cells * w_cells, C)
  EgoMotion2D motion;
};

/// Warps (N, C) history features onto the current grid; outside cells are zero.
Var align_history(Graph& g, Var history, const GridSpec& spec, const EgoMotion2D& motion);

/// Queries attend into {queries, aligned history}; without history the
/// queries serve as their own history.
Var temporal_self_attention(Graph& g, ParamStore& store, const EncoderConfig& cfg, int layer, Var queries,
                            const History* history);

struct LayerTrace {
  std::vector<ReferencePoint3D> reference_points;  // row n * refs + r
  std::vector<ReferencePoint3D> neighbor_points;
  std::vector<HeightField> fields;  // every field the layer produced
};

struct LayerOutput {
  Var bev;    // (N, C)
  Var fused;  // (N, D); invalid with VHA off
};

/// Reference points of every cell at the given per-cell heights (N * refs).
std::vector<ReferencePoint3D> reference_points(const GridSpec& spec, const std::vector<double>& heights,
                                               int refs_per_cell);

LayerOutput encoder_layer(Graph& g, ParamStore& store, const EncoderConfig& cfg, int layer, Var queries,
                          const History* history, const MultiViewFeatures& views,
                          const std::vector<CameraModel>& cams, LayerTrace* trace = nullptr);

struct FrameOutput {
  Var bev;
  std::vector<Var> fused;  // one per layer with VHA on
};

FrameOutput encode_frame(Graph& g, ParamStore& store, const EncoderConfig& cfg, Var images,
                         const History* history, const std::vector<CameraModel>& cams,
                         std::vector<LayerTrace>* trace = nullptr);

// ---------------------------------------------------------------- sequences

struct SequenceFrame {
  const Tensor* images;  // (n_view, rows, cols, 3)
  Pose2D ego_pose;
};

struct EncodedFrame {
  Tensor bev;                       // (N, C)
  std::vector<HeightField> fused;   // per layer
};

/// Encodes frames in order without gradient tracking, threading each output
/// into the next frame as history.
std::vector<EncodedFrame> run_sequence(ParamStore& store, const EncoderConfig& cfg,
                                       const std::vector<SequenceFrame>& frames,
                                       const std::vector<CameraModel>& cams);

}  // namespace hgbev
