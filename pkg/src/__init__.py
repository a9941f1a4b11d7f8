# geodecomp library modules
