# Modulo database per l'archivio SQLite delle metriche
