# Modulo dashboard per il monitoraggio dell'addestramento
