# Modulo training: ciclo di addestramento, checkpoint e inferenza
