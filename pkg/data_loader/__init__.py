# Modulo data_loader per annotazioni COCO e LabelMe, dati sintetici e batch
