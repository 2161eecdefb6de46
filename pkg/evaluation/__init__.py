# Modulo evaluation per le metriche di rilevamento
