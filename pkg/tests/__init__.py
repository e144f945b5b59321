# Tests del simulador; como paquete, pytest añade la raíz del repo a sys.path
