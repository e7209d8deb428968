import dataclasses

from nikrecon import classic, utils
from nikrecon.experiment import config_hash
from nikrecon.methods.base import BaseMethod, ReconContext


class XDGrasp(BaseMethod):
    name = "xdgrasp"

    def reconstruct(self, ctx: ReconContext) -> classic.DynamicImage:
        cfg = self.cfg.xdgrasp
        result = classic.xdgrasp_recon(ctx.bins, ctx.coils, cfg)
        classic.write_objective_csv(result.history, ctx.out_dir / "objective.csv")

        if result.line_search_failed:
            utils.warning("XD-GRASP line search failed; kept the best iterate\n")

        return dataclasses.replace(result, config_hash=config_hash(cfg))
