from . import errors
from . import meshcore
from . import records
from . import fibers
from . import constitutive
from . import fesolve
from . import datagen
from . import gradkernel
from . import unloadnet
from . import trainer
from . import evalkit
