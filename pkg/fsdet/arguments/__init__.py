from .arguments import FSDetArgs
