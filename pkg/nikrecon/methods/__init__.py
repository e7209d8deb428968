# Force modules to load so __init_subclass__ is fired
from nikrecon.methods.base import (
    METHOD_CLASSES,
    BaseMethod,
    ReconContext,
    get_method,
    method_names,
)
from nikrecon.methods.iconik import ICoNIK
from nikrecon.methods.inufft import INUFFT
from nikrecon.methods.nik import NIK
from nikrecon.methods.xdgrasp import XDGrasp
