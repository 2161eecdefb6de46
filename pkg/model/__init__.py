# Modulo model: backbone, piramide di fusione, transformer deformabile e loss
