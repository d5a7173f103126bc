"""flowsplat."""

from flowsplat.autodiff import *
from flowsplat.camera import *
from flowsplat.correspondence import *
from flowsplat.deform import *
from flowsplat.errors import *
from flowsplat.experiments import *
from flowsplat.formats import *
from flowsplat.gaussians import *
from flowsplat.losses import *
from flowsplat.metrics import *
from flowsplat.rasterizer import *
from flowsplat.synth import *
from flowsplat.trainers import *
from flowsplat.viz import *
