from nikrecon import classic
from nikrecon.methods.base import BaseMethod, ReconContext


class INUFFT(BaseMethod):
    name = "inufft"

    def reconstruct(self, ctx: ReconContext) -> classic.DynamicImage:
        return classic.inufft_recon(ctx.bins, ctx.coils)
