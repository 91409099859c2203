from gmmc.centroids import *
from gmmc.checkpoint import *
from gmmc.config import *
from gmmc.data import *
from gmmc.errors import *
from gmmc.evaluation import *
from gmmc.events import *
from gmmc.handlers import *
from gmmc.metrics import *
from gmmc.model import *
from gmmc.network import *
from gmmc.optim import *
from gmmc.reports import *
from gmmc.sampler import *
from gmmc.schedule import *
from gmmc.training import *

version_major = 0
version_minor = 1
version_patch = 0
__version__ = f"{version_major}.{version_minor}.{version_patch}"
"""Current gmmc version in {major}.{minor}.{patch} format."""
