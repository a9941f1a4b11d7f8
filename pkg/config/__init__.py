# geodecomp settings
