import logging
from pathlib import Path
from typing import Optional

import numpy as np

from nikrecon import ico, nik, storage, utils
from nikrecon.classic import DynamicImage, nav_ranges
from nikrecon.experiment import config_hash
from nikrecon.methods.base import BaseMethod, ReconContext
from nikrecon.methods.nik import CHECKPOINT_NAME, train_and_save

LOG = logging.getLogger(__name__)


def find_nik_checkpoint(ctx: ReconContext) -> Optional[Path]:
    """
    An explicit checkpoint wins; otherwise reuse the one written by a `nik`
    reconstruction next to this output directory.
    """
    if ctx.checkpoint is not None:
        return ctx.checkpoint

    sibling = ctx.out_dir.parent / "nik" / CHECKPOINT_NAME
    return sibling if sibling.exists() else None


class ICoNIK(BaseMethod):
    name = "iconik"

    def reconstruct(self, ctx: ReconContext) -> DynamicImage:
        cfg = self.cfg.ico
        path = find_nik_checkpoint(ctx)
        if path is None:
            utils.warning("No NIK checkpoint found, training one first\n")
            model = train_and_save(ctx, ctx.out_dir / CHECKPOINT_NAME).nik
        else:
            LOG.info(f"Reusing NIK checkpoint {path}")
            model = storage.load_checkpoint(path).nik

        before = model.fingerprint()
        kernel = ico.calibrate_ico(
            model,
            ctx.dataset,
            cfg.acr,
            cfg.train,
            hidden=cfg.hidden_channels,
            offset=cfg.offset,
        )
        after = model.fingerprint()
        LOG.info(f"NIK fingerprint before {before[:12]}, after {after[:12]}")

        storage.save_checkpoint(
            storage.Checkpoint(nik=model, coils=ctx.coils, ico=kernel),
            ctx.out_dir / "iconik.ckpt",
        )

        height, width = ctx.coils.shape
        images = [
            nik.grid_to_image(ico.iconik_infer(model, kernel, nav, height, width), ctx.coils)
            for nav in ctx.query_navs
        ]
        return DynamicImage(
            images=np.stack(images),
            nav_ranges=nav_ranges(ctx.bins),
            method=self.name,
            config_hash=config_hash({"nik": model.fingerprint(), "ico": cfg}),
        )
