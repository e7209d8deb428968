import dataclasses
import logging
from pathlib import Path

import numpy as np

from nikrecon import nik, storage, utils
from nikrecon.classic import DynamicImage, nav_ranges
from nikrecon.experiment import config_hash
from nikrecon.methods.base import BaseMethod, ReconContext

LOG = logging.getLogger(__name__)

CHECKPOINT_NAME = "nik.ckpt"


def train_and_save(ctx: ReconContext, path: Path) -> storage.Checkpoint:
    cfg = ctx.cfg
    model = nik.train_nik(
        ctx.dataset,
        cfg.nik,
        cfg.nik_train,
        on_checkpoint=lambda snapshot: storage.save_checkpoint(
            storage.Checkpoint(nik=snapshot, coils=ctx.coils), path
        ),
    )
    storage.write_csv([r._asdict() for r in model.history], path.parent / "training_log.csv")

    ckpt = storage.Checkpoint(
        nik=model,
        coils=ctx.coils,
        extra={
            "architecture": dataclasses.asdict(cfg.nik),
            "train": dataclasses.asdict(cfg.nik_train),
        },
    )
    storage.save_checkpoint(ckpt, path)
    elapsed = model.history[-1].seconds if model.history else 0.0
    utils.success(
        f"NIK trained in {utils.format_duration(elapsed)}, fingerprint {model.fingerprint()[:12]}\n"
    )
    return ckpt


class NIK(BaseMethod):
    name = "nik"

    def reconstruct(self, ctx: ReconContext) -> DynamicImage:
        ckpt = train_and_save(ctx, ctx.out_dir / CHECKPOINT_NAME)
        images = [nik.nik_image(ckpt.nik, nav, ctx.coils) for nav in ctx.query_navs]
        return DynamicImage(
            images=np.stack(images),
            nav_ranges=nav_ranges(ctx.bins),
            method=self.name,
            config_hash=config_hash({"nik": self.cfg.nik, "train": self.cfg.nik_train}),
        )
