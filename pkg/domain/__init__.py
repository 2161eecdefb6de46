# Modulo domain per i tipi, la configurazione, gli errori e gli eventi
