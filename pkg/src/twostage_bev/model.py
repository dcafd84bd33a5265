"""The full two-stage detector and its per-frame loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad, using_dtype
from .autodiff.nn import Module
from .autodiff.tensor import DiffTensor
from .backbone import Backbone
from .config import ExperimentConfig
from .decoder import BEVDecoder, DecoderConfig, LayerOutput, bev_loss, decode_detections, total_loss
from .geometry import Box3D
from .perspective_head import (HeadConfig, Locations, PerspectiveHead, PerspectivePrediction,
                               assign_targets, camera_box_to_ego, decode_proposals, make_locations,
                               perspective_loss)
from .proposals import PipelineConfig, Proposal, ProposalSet, nms_bev_then_topk2, run_pipeline
from .scene_sim import SceneFrame, relative_pose
from .spatial_encoder import BEVGrid, BEVGridSpec, SpatialEncoder
from .temporal_encoder import TemporalFusion


def grid_spec(cfg: ExperimentConfig) -> BEVGridSpec:
    r = cfg.data.bev_range
    return BEVGridSpec(x_range=(-r, r), y_range=(-r, r), H=cfg.model.bev_h, W=cfg.model.bev_w,
                       z_anchors=tuple(cfg.model.z_anchors))


def pipeline_config(cfg: ExperimentConfig) -> PipelineConfig:
    e = cfg.eval
    return PipelineConfig(e.pers_nms_iou, e.bev_nms_iou, e.k1, e.k2)


@dataclass(eq=False)
class ForwardResult:
    pers: PerspectivePrediction | None = None
    bev: BEVGrid | None = None
    decoder: list = field(default_factory=list)
    aux_decoder: list = field(default_factory=list)
    proposals: ProposalSet | None = None
    pyramid: object = None  # backbone FeaturePyramid of the current frame


class TwoStageDetector(Module):
    def __init__(self, cfg: ExperimentConfig, rng: np.random.Generator | None = None):
        m = cfg.model
        self.cfg = cfg
        self.spec = grid_spec(cfg)
        rng = rng if rng is not None else np.random.default_rng(cfg.train.seed)
        self.head_cfg = HeadConfig(num_classes=cfg.data.num_classes, tower_convs=m.head_tower_convs)
        self.backbone = Backbone(rng, m.backbone_width, m.blocks_per_stage, m.channels)
        self.pers_head = PerspectiveHead(rng, m.channels, self.head_cfg)
        self.encoder = SpatialEncoder(rng, self.spec, m.channels, m.encoder_layers, m.encoder_points)
        self.fusion = TemporalFusion(rng, m.channels, m.num_history, m.fusion_blocks) if m.num_history else None
        dec = DecoderConfig(num_queries=m.num_queries, num_layers=m.decoder_layers, n_points=m.decoder_points,
                            num_classes=cfg.data.num_classes)
        self.decoder = BEVDecoder(rng, m.channels, self.spec, dec)
        self.aux_decoder = None
        if cfg.ablation.arm == "bev_and_bev":
            aux = DecoderConfig(num_queries=m.num_queries, num_layers=m.aux_decoder_layers,
                                n_points=m.decoder_points, num_classes=cfg.data.num_classes)
            self.aux_decoder = BEVDecoder(rng, m.channels, self.spec, aux)
        self._locs: dict = {}
        if m.dtype == "float32":
            self.astype(np.float32)

    @property
    def dtype(self):
        return np.float32 if self.cfg.model.dtype == "float32" else np.float64

    def locations(self, shapes) -> Locations:
        key = tuple(shapes)
        if key not in self._locs:
            self._locs[key] = make_locations(shapes)
        return self._locs[key]

    # -- stages ----------------------------------------------------------------

    def bev_features(self, frame: SceneFrame, pyramid=None) -> BEVGrid:
        pyramid = pyramid if pyramid is not None else self.backbone(frame.images.astype(self.dtype))
        return self.encoder(pyramid, frame.rig, frame.timestamp, frame.ego_pose)

    def perspective_proposals(self, frame: SceneFrame, pers: PerspectivePrediction) -> ProposalSet:
        e = self.cfg.eval
        cls_flat, box_flat = pers.flat()
        locs = self.locations(pers.shapes())
        views = []
        for v in range(frame.rig.num_views):
            K, T = frame.rig.view(v)
            props = decode_proposals(cls_flat.data[v].astype(float), box_flat.data[v].astype(float), locs, K,
                                     e.proposal_score_thresh, self.head_cfg, e.proposal_candidates)
            views.append([(camera_box_to_ego(b, T), s) for b, s in props])
        return run_pipeline(views, frame.rig, pipeline_config(self.cfg))

    def bev_proposals(self, aux_out: LayerOutput) -> ProposalSet:
        e = self.cfg.eval
        dets = decode_detections(aux_out, e.proposal_score_thresh, e.proposal_candidates)
        cands = [Proposal(b, b.score, 0, i) for i, b in enumerate(dets)]
        return nms_bev_then_topk2(cands, e.bev_nms_iou, e.k2)

    def forward(self, frame: SceneFrame, history=(), proposal_override=None) -> ForwardResult:
        """``history`` holds (SceneFrame) entries; their BEV features are computed without gradient.

        ``proposal_override`` replaces the first-stage proposals with fixed BEV centres.
        """
        with using_dtype(self.dtype):
            return self._forward(frame, history, proposal_override)

    def _forward(self, frame, history, proposal_override) -> ForwardResult:
        arm = self.cfg.ablation.arm
        use_pers = arm in ("perspective_only", "perspective_and_bev")
        use_bev = arm != "perspective_only"
        res = ForwardResult()
        pyramid = self.backbone(frame.images.astype(self.dtype))
        res.pyramid = pyramid
        if use_pers:
            res.pers = self.pers_head(pyramid)
        if not use_bev:
            res.proposals = self.perspective_proposals(frame, res.pers)
            return res
        bev = self.bev_features(frame, pyramid)
        if self.fusion is not None:
            others = []
            with no_grad():
                for h in history:
                    grid = self.bev_features(h)
                    others.append((BEVGrid(grid.spec, DiffTensor(grid.features.data), h.timestamp, h.ego_pose),
                                   relative_pose(frame, h)))
            bev = self.fusion(bev, others)
        res.bev = bev
        centers = np.zeros((0, 2))
        if proposal_override is not None:
            centers = np.asarray(proposal_override, dtype=float).reshape(-1, 2)
        elif arm == "perspective_and_bev":
            res.proposals = self.perspective_proposals(frame, res.pers)
            centers = res.proposals.bev_centers
        elif arm == "bev_and_bev":
            res.aux_decoder = self.aux_decoder(bev)
            res.proposals = self.bev_proposals(res.aux_decoder[-1])
            centers = res.proposals.bev_centers
        res.decoder = self.decoder(bev, centers)
        return res

    __call__ = forward

    # -- loss ------------------------------------------------------------------

    def loss(self, frame: SceneFrame, res: ForwardResult):
        """(L_total, logged components) for one frame."""
        with using_dtype(self.dtype):
            return self._loss(frame, res)

    def loss_terms(self, frame: SceneFrame, res: ForwardResult):
        """(L_bev, L_pers, logged components) before weighting."""
        with using_dtype(self.dtype):
            return self._terms(frame, res)

    def _loss(self, frame: SceneFrame, res: ForwardResult):
        lb, lp = self.cfg.loss_weights()
        l_bev, l_pers, parts = self._terms(frame, res)
        total = total_loss(l_bev, l_pers, lb, lp)
        parts["L_total"] = float(total.data)
        return total, parts

    def _terms(self, frame: SceneFrame, res: ForwardResult):
        lb, lp = self.cfg.loss_weights()
        zero = DiffTensor(np.zeros((), dtype=self.dtype))
        parts = {"L_bev": 0.0, "L_pers": 0.0, "L_2D": 0.0, "L_3D": 0.0, "L_conf": 0.0}
        l_pers, l_bev = zero, zero
        if res.pers is not None and lp > 0:
            locs = self.locations(res.pers.shapes())
            targets = []
            for v in range(frame.rig.num_views):
                K, T = frame.rig.view(v)
                targets.append(assign_targets(locs, frame.gt_boxes, T, K, self.head_cfg))
            l_pers, comps = perspective_loss(res.pers, targets, locs, list(frame.rig.intrinsics), self.head_cfg)
            parts.update({k: float(v.data) for k, v in comps.items()})
            parts["L_pers"] = float(l_pers.data)
        if res.decoder and lb > 0:
            l_bev, _ = bev_loss(res.decoder, frame.gt_boxes, self.decoder.cfg)
            if res.aux_decoder:
                l_aux, _ = bev_loss(res.aux_decoder, frame.gt_boxes, self.aux_decoder.cfg)
                l_bev = l_bev + l_aux
            parts["L_bev"] = float(l_bev.data)
        return l_bev, l_pers, parts

    # -- inference -------------------------------------------------------------

    def detect(self, frame: SceneFrame, history=()) -> list[Box3D]:
        with no_grad():
            res = self.forward(frame, history)
        e = self.cfg.eval
        if self.cfg.ablation.arm == "perspective_only":
            return [p.box.replace(score=p.score) for p in res.proposals.proposals
                    if p.score >= e.score_thresh][:e.max_detections]
        return decode_detections(res.decoder[-1], e.score_thresh, e.max_detections)
